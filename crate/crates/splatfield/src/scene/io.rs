//! Binary file formats: SPSC bundles, SPMK masks, SPFM feature maps,
//! and P6 PPM images. All multi-byte values are little-endian; scalars
//! are stored as f32 on disk.

use super::{
    validate_bundle, FeatureMap, GaussianPrimitive, InstanceMaskSet, SceneBundle, SceneError,
};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const SPSC_MAGIC: [u8; 4] = *b"SPSC";
pub const SPMK_MAGIC: [u8; 4] = *b"SPMK";
pub const SPFM_MAGIC: [u8; 4] = *b"SPFM";
pub const SPSC_VERSION: u32 = 1;

struct Rd<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Rd<R> {
    fn new(inner: R) -> Self {
        Rd { inner, offset: 0 }
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<(), SceneError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(SceneError::Truncated { offset: self.offset })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn bytes4(&mut self) -> Result<[u8; 4], SceneError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.bytes4()?))
    }

    fn u16(&mut self) -> Result<u16, SceneError> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f64, SceneError> {
        Ok(f32::from_le_bytes(self.bytes4()?) as f64)
    }
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f32<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&(v as f32).to_le_bytes())
}

fn write_primitive<W: Write>(w: &mut W, p: &GaussianPrimitive, sem: bool) -> std::io::Result<()> {
    for &v in &p.mu {
        w_f32(w, v)?;
    }
    w_f32(w, p.alpha)?;
    for &v in &p.rot {
        w_f32(w, v)?;
    }
    for &v in &p.scale {
        w_f32(w, v)?;
    }
    for &v in &p.sh {
        w_f32(w, v)?;
    }
    w_f32(w, p.beta)?;
    for &v in &p.f_inst {
        w_f32(w, v)?;
    }
    if sem {
        for v in p.f_sem.as_deref().unwrap_or(&[]) {
            w_f32(w, *v)?;
        }
    }
    Ok(())
}

fn read_primitive<R: Read>(
    r: &mut Rd<R>,
    sh_len: usize,
    n: usize,
    m: Option<usize>,
) -> Result<GaussianPrimitive, SceneError> {
    let mut mu = [0.0; 3];
    for v in &mut mu {
        *v = r.f32()?;
    }
    let alpha = r.f32()?;
    let mut rot = [0.0; 4];
    for v in &mut rot {
        *v = r.f32()?;
    }
    let mut scale = [0.0; 3];
    for v in &mut scale {
        *v = r.f32()?;
    }
    let mut sh = Vec::with_capacity(sh_len);
    for _ in 0..sh_len {
        sh.push(r.f32()?);
    }
    let beta = r.f32()?;
    let mut f_inst = Vec::with_capacity(n);
    for _ in 0..n {
        f_inst.push(r.f32()?);
    }
    let f_sem = match m {
        Some(m) => {
            let mut f = Vec::with_capacity(m);
            for _ in 0..m {
                f.push(r.f32()?);
            }
            Some(f)
        }
        None => None,
    };
    Ok(GaussianPrimitive { mu, alpha, rot, scale, sh, beta, f_inst, f_sem })
}

pub fn save_bundle(bundle: &SceneBundle, path: &Path) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle(bundle, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_bundle<W: Write>(bundle: &SceneBundle, w: &mut W) -> std::io::Result<()> {
    w.write_all(&SPSC_MAGIC)?;
    w_u32(w, SPSC_VERSION)?;
    w_u32(w, bundle.views)?;
    w_u32(w, bundle.height)?;
    w_u32(w, bundle.width)?;
    w_u32(w, bundle.downsample)?;
    w_u32(w, bundle.n_dim)?;
    w_u32(w, bundle.m_dim)?;
    w_u32(w, bundle.sh_degree)?;
    w_u32(w, bundle.fine.len() as u32)?;
    w_u32(w, bundle.coarse.len() as u32)?;
    for p in &bundle.fine {
        write_primitive(w, p, false)?;
    }
    for p in &bundle.coarse {
        write_primitive(w, p, true)?;
    }
    Ok(())
}

/// Serializes a bundle to bytes; the CLI uses this for output digests.
pub fn bundle_to_bytes(bundle: &SceneBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    write_bundle(bundle, &mut buf).expect("writing to Vec cannot fail");
    buf
}

pub fn load_bundle(path: &Path) -> Result<SceneBundle, SceneError> {
    let r = BufReader::new(File::open(path)?);
    let mut bundle = read_bundle(r)?;
    bundle.provenance = path.display().to_string();
    Ok(bundle)
}

pub fn read_bundle<R: Read>(inner: R) -> Result<SceneBundle, SceneError> {
    let mut r = Rd::new(inner);
    let magic = r.bytes4()?;
    if magic != SPSC_MAGIC {
        return Err(SceneError::BadMagic { expected: SPSC_MAGIC, found: magic });
    }
    let version = r.u32()?;
    if version != SPSC_VERSION {
        return Err(SceneError::BadVersion { found: version });
    }
    let views = r.u32()?;
    let height = r.u32()?;
    let width = r.u32()?;
    let downsample = r.u32()?;
    let n_dim = r.u32()?;
    let m_dim = r.u32()?;
    let sh_degree = r.u32()?;
    let n_fine = r.u32()? as usize;
    let n_coarse = r.u32()? as usize;
    if sh_degree > 8 {
        return Err(SceneError::Invalid(format!("sh degree {sh_degree} too large")));
    }
    let per_pixel_cap = 64usize * 1024 * 1024;
    if n_fine > per_pixel_cap || n_coarse > per_pixel_cap {
        return Err(SceneError::Invalid(format!(
            "implausible primitive counts: fine={n_fine} coarse={n_coarse}"
        )));
    }
    let sh_len = 3 * ((sh_degree + 1) * (sh_degree + 1)) as usize;
    let mut fine = Vec::with_capacity(n_fine);
    for _ in 0..n_fine {
        fine.push(read_primitive(&mut r, sh_len, n_dim as usize, None)?);
    }
    let mut coarse = Vec::with_capacity(n_coarse);
    for _ in 0..n_coarse {
        coarse.push(read_primitive(&mut r, sh_len, n_dim as usize, Some(m_dim as usize))?);
    }
    let bundle = SceneBundle {
        fine,
        coarse,
        n_dim,
        m_dim,
        sh_degree,
        views,
        height,
        width,
        downsample,
        provenance: String::new(),
    };
    let violations = validate_bundle(&bundle);
    if !violations.is_empty() {
        let text = violations
            .iter()
            .take(16)
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        return Err(SceneError::InvariantViolations(text));
    }
    Ok(bundle)
}

pub fn save_masks(mask: &InstanceMaskSet, path: &Path) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SPMK_MAGIC)?;
    w_u32(&mut w, mask.height)?;
    w_u32(&mut w, mask.width)?;
    w_u32(&mut w, mask.m)?;
    for &id in &mask.ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<InstanceMaskSet, SceneError> {
    let mut r = Rd::new(BufReader::new(File::open(path)?));
    let magic = r.bytes4()?;
    if magic != SPMK_MAGIC {
        return Err(SceneError::BadMagic { expected: SPMK_MAGIC, found: magic });
    }
    let height = r.u32()?;
    let width = r.u32()?;
    let m = r.u32()?;
    let count = (height as usize) * (width as usize);
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.u16()?);
    }
    let mask = InstanceMaskSet { width, height, ids, m };
    mask.validate().map_err(SceneError::Invalid)?;
    Ok(mask)
}

pub fn save_feature_map(map: &FeatureMap, path: &Path) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SPFM_MAGIC)?;
    w_u32(&mut w, map.height)?;
    w_u32(&mut w, map.width)?;
    w_u32(&mut w, map.channels)?;
    for &v in &map.data {
        w_f32(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap, SceneError> {
    let mut r = Rd::new(BufReader::new(File::open(path)?));
    let magic = r.bytes4()?;
    if magic != SPFM_MAGIC {
        return Err(SceneError::BadMagic { expected: SPFM_MAGIC, found: magic });
    }
    let height = r.u32()?;
    let width = r.u32()?;
    let channels = r.u32()?;
    let count = (height as usize) * (width as usize) * (channels as usize);
    if count > 1usize << 31 {
        return Err(SceneError::Invalid(format!("implausible map size {height}x{width}x{channels}")));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32()?);
    }
    let map = FeatureMap { width, height, channels, data };
    if !map.all_finite() {
        return Err(SceneError::Invalid("feature map contains non-finite entries".into()));
    }
    Ok(map)
}

/// Writes an RGB map in [0,1] as binary PPM (P6, maxval 255).
pub fn save_ppm(map: &FeatureMap, path: &Path) -> Result<(), SceneError> {
    if map.channels != 3 {
        return Err(SceneError::Invalid(format!("PPM needs 3 channels, got {}", map.channels)));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", map.width, map.height)?;
    for &v in &map.data {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        w.write_all(&[byte])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<FeatureMap, SceneError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = |msg: &str| SceneError::Invalid(format!("bad PPM header: {msg}"));
    if !bytes.starts_with(b"P6") {
        return Err(header_err("missing P6 signature"));
    }
    // Header: three whitespace-separated fields after "P6", then one byte.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && (bytes[pos] as char).is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err("not utf8"))?;
        *field = text.parse().map_err(|_| header_err("non-numeric field"))?;
    }
    pos += 1; // single whitespace after maxval
    let (width, height, maxval) = (fields[0] as u32, fields[1] as u32, fields[2]);
    if maxval != 255 {
        return Err(header_err("maxval must be 255"));
    }
    let count = (width * height * 3) as usize;
    if bytes.len() < pos + count {
        return Err(SceneError::Truncated { offset: bytes.len() as u64 });
    }
    let data = bytes[pos..pos + count].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(FeatureMap { width, height, channels: 3, data })
}
