//! Scene files, raster formats, checkpoints, run configuration and the
//! metrics log.
//!
//! Rasters are PNG (8- or 16-bit color, 16-bit depth, 1-bit masks) or
//! portable float maps for depth. A manifest is a TOML file with one
//! `[[scenes]]` table per entry; relative paths resolve against the
//! manifest's directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics, RigidTransform};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, ImageRgb};
use crate::lift::RgbdInput;
use crate::metrics::MetricsRecord;
use crate::predictor::{DirectFit, Predictor, PredictorKind, TinyConv};
use crate::train::TrainConfig;

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decoded PNG samples, channels interleaved, normalized to [0, 1].
struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    bits: u8,
    samples: Vec<u16>,
}

fn read_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| load_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| load_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| load_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| load_err(path, e))?;
    let channels = info.color_type.samples();
    let bits = match info.bit_depth {
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => 16,
        other => return Err(load_err(path, format!("unsupported bit depth {other:?}"))),
    };
    let data = &buf[..info.buffer_size()];
    let samples = if bits == 16 {
        data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        data.iter().map(|b| *b as u16).collect()
    };
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        bits,
        samples,
    })
}

/// Reads an 8- or 16-bit PNG as linear RGB in [0, 1]. Gray images are
/// replicated to three channels and alpha is dropped.
pub fn read_rgb_png(path: &Path) -> Result<ImageRgb> {
    let r = read_png(path)?;
    let max = ((1u32 << r.bits) - 1) as f64;
    let pixels = r
        .samples
        .chunks_exact(r.channels)
        .map(|p| match r.channels {
            1 | 2 => [p[0] as f64 / max; 3],
            _ => [p[0] as f64 / max, p[1] as f64 / max, p[2] as f64 / max],
        })
        .collect();
    Grid::from_vec(r.width, r.height, pixels)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| load_err(path, e))?;
    writer.write_image_data(data).map_err(|e| load_err(path, e))?;
    writer.finish().map_err(|e| load_err(path, e))?;
    Ok(())
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// 16-bit RGB PNG of `image` clamped to [0, 1].
pub fn write_rgb16_png(path: &Path, image: &ImageRgb) -> Result<()> {
    let mut data = Vec::with_capacity(image.len() * 6);
    for p in image.iter() {
        for v in p {
            data.extend_from_slice(&(quantize(*v, 65535.0) as u16).to_be_bytes());
        }
    }
    write_png(path, image.width(), image.height(), png::ColorType::Rgb, png::BitDepth::Sixteen, &data)
}

/// 8-bit RGB PNG of `image` clamped to [0, 1].
pub fn write_rgb8_png(path: &Path, image: &ImageRgb) -> Result<()> {
    let data: Vec<u8> = image.iter().flat_map(|p| p.map(|v| quantize(v, 255.0) as u8)).collect();
    write_png(path, image.width(), image.height(), png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// 16-bit grayscale PNG of raw samples.
pub fn write_gray16_png(path: &Path, raw: &Grid<u16>) -> Result<()> {
    let data: Vec<u8> = raw.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, raw.width(), raw.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

/// 1-bit grayscale PNG; `true` is white.
pub fn write_mask_png(path: &Path, mask: &Grid<bool>) -> Result<()> {
    let stride = mask.width().div_ceil(8);
    let mut data = vec![0u8; stride * mask.height()];
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if *mask.get(c, r) {
                data[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, png::BitDepth::One, &data)
}

/// Reads a mask PNG of any bit depth; nonzero is `true`.
pub fn read_mask_png(path: &Path) -> Result<Grid<bool>> {
    let r = read_png(path)?;
    let values = r.samples.chunks_exact(r.channels).map(|p| p[0] != 0).collect();
    Grid::from_vec(r.width, r.height, values)
}

/// Reads a single-channel portable float map (`Pf`). Rows are stored
/// bottom to top; a negative scale means little-endian samples.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    File::open(path).map_err(|e| load_err(path, e))?.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(load_err(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(load_err(path, format!("expected a grayscale PFM (Pf), found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| load_err(path, format!("bad PFM header field {s}")));
    let (w, h, scale) = (parse(&fields[1])? as usize, parse(&fields[2])? as usize, parse(&fields[3])?);
    let data = bytes.get(pos..pos + 4 * w * h).ok_or_else(|| load_err(path, "truncated PFM data"))?;
    let little = scale < 0.0;
    let mut out = Grid::filled(w, h, 0.0);
    for (i, b) in data.chunks_exact(4).enumerate() {
        let raw = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (col, row_from_bottom) = (i % w, i / w);
        out.set(col, h - 1 - row_from_bottom, v as f64);
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "Pf\n{} {}\n-1.0\n", depth.width(), depth.height())?;
    for row in (0..depth.height()).rev() {
        for col in 0..depth.width() {
            f.write_all(&(*depth.get(col, row) as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// One RGB-D scene on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub image_path: PathBuf,
    pub depth_path: PathBuf,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Scene units per stored depth unit.
    pub depth_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scenes: Vec<SceneEntry>,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| load_err(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| load_err(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads every scene, resolving relative paths against `base`.
    pub fn load_all(&self, base: &Path) -> Result<Vec<RgbdInput>> {
        self.scenes.iter().map(|e| load_scene(e, base)).collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads an entry. 16-bit depth PNGs are multiplied by `depth_scale`; PFM
/// values too. Non-positive or non-finite depths are replaced by the 1st
/// percentile of the positive ones, with a warning.
pub fn load_scene(entry: &SceneEntry, base: &Path) -> Result<RgbdInput> {
    let image_path = resolve(base, &entry.image_path);
    let depth_path = resolve(base, &entry.depth_path);
    if !(entry.depth_scale > 0.0 && entry.depth_scale.is_finite()) {
        return Err(load_err(&depth_path, format!("depth_scale must be > 0, got {}", entry.depth_scale)));
    }
    let image = read_rgb_png(&image_path)?;
    let is_pfm = depth_path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let raw = if is_pfm {
        read_pfm(&depth_path)?
    } else {
        let r = read_png(&depth_path)?;
        if r.channels != 1 || r.bits != 16 {
            return Err(load_err(&depth_path, "depth PNG must be 16-bit grayscale"));
        }
        Grid::from_vec(r.width, r.height, r.samples.iter().map(|v| *v as f64).collect())?
    };
    if raw.dims() != image.dims() {
        return Err(Error::Load {
            path: depth_path.clone(),
            reason: format!(
                "{}x{} depth does not match {}x{} image {}",
                raw.width(),
                raw.height(),
                image.width(),
                image.height(),
                image_path.display()
            ),
        });
    }
    let mut depth = raw.map(|v| v * entry.depth_scale);
    let mut positive: Vec<f64> = depth.iter().copied().filter(|d| *d > 0.0 && d.is_finite()).collect();
    if positive.is_empty() {
        return Err(load_err(&depth_path, "no positive depth values"));
    }
    let bad = depth.len() - positive.len();
    if bad > 0 {
        positive.sort_by(f64::total_cmp);
        let floor = positive[(positive.len() - 1) / 100];
        log::warn!("{}: {bad} non-positive depths clamped to {floor}", depth_path.display());
        for d in depth.as_mut_slice() {
            if !(*d > 0.0 && d.is_finite()) {
                *d = floor;
            }
        }
    }
    let camera = Camera::new(
        Intrinsics {
            fx: entry.fx,
            fy: entry.fy,
            cx: entry.cx,
            cy: entry.cy,
        },
        image.width(),
        image.height(),
        RigidTransform::identity(),
    )?;
    RgbdInput::new(image, depth, camera)
}

/// Writes `<stem>.png` (16-bit RGB) and `<stem>_depth.png` (16-bit depth in
/// units of `depth_scale`) into `dir` and returns the entry with paths
/// relative to `dir`. Depths must fit in 16 bits after scaling.
pub fn save_scene(dir: &Path, stem: &str, input: &RgbdInput, depth_scale: f64) -> Result<SceneEntry> {
    let image_path = PathBuf::from(format!("{stem}.png"));
    let depth_path = PathBuf::from(format!("{stem}_depth.png"));
    let raw = input.depth.map(|d| (d / depth_scale).round());
    if raw.iter().any(|v| *v < 1.0 || *v > 65535.0) {
        return Err(Error::InvalidArgument(format!(
            "depth does not fit 16 bits at depth_scale {depth_scale}"
        )));
    }
    write_rgb16_png(&dir.join(&image_path), &input.image)?;
    write_gray16_png(&dir.join(&depth_path), &raw.map(|v| *v as u16))?;
    let c = &input.camera;
    Ok(SceneEntry {
        image_path,
        depth_path,
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        depth_scale,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CSPLATCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, predictor name, shape, f32
/// little-endian parameters and the config as TOML.
pub fn write_checkpoint(path: &Path, pred: &dyn Predictor, cfg: &TrainConfig) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let name = pred.kind().name().as_bytes();
    f.write_all(&(name.len() as u32).to_le_bytes())?;
    f.write_all(name)?;
    let dims = pred.dims();
    f.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        f.write_all(&d.to_le_bytes())?;
    }
    f.write_all(&(pred.params().len() as u64).to_le_bytes())?;
    for p in pred.params() {
        f.write_all(&(*p as f32).to_le_bytes())?;
    }
    let config = config_to_string(cfg)?;
    f.write_all(&(config.len() as u64).to_le_bytes())?;
    f.write_all(config.as_bytes())?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(Box<dyn Predictor>, TrainConfig)> {
    let data = std::fs::read(path).map_err(|e| load_err(path, e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let name_len = c.u32()? as usize;
    let name = String::from_utf8_lossy(c.take(name_len)?).into_owned();
    let ndims = c.u32()? as usize;
    let dims = (0..ndims).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let n = c.u64()? as usize;
    let params: Vec<f64> = c
        .take(4 * n)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let cfg_len = c.u64()? as usize;
    let cfg = parse_config(&String::from_utf8_lossy(c.take(cfg_len)?))?;
    let bad_dims = || Error::Checkpoint(format!("bad dims {dims:?} for {name}"));
    let pred: Box<dyn Predictor> = match name.as_str() {
        n if n == PredictorKind::DirectFit.name() => {
            let [w, h, s] = dims[..] else { return Err(bad_dims()) };
            Box::new(DirectFit::from_params(w as usize, h as usize, s as usize, params)?)
        }
        n if n == PredictorKind::TinyConv.name() => {
            let [hidden] = dims[..] else { return Err(bad_dims()) };
            Box::new(TinyConv::from_params(hidden as usize, params)?)
        }
        other => return Err(Error::Checkpoint(format!("unknown predictor {other}"))),
    };
    Ok((pred, cfg))
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_string(cfg: &TrainConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&std::fs::read_to_string(path).map_err(|e| load_err(path, e))?)
}

/// Appends one JSON line per record.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::Io(e.into()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| load_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| load_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn scene() -> RgbdInput {
        let image = Grid::from_fn(9, 7, |c, r| [c as f64 / 8.0, r as f64 / 6.0, ((c * r) % 5) as f64 / 4.0]);
        let depth = Grid::from_fn(9, 7, |c, r| 1.0 + 0.001 * (c * 7 + r) as f64);
        RgbdInput::new(image, depth, Camera::centered(9, 7, 8.0).unwrap()).unwrap()
    }

    #[test]
    fn depth_scaling() {
        let dir = tempfile::tempdir().unwrap();
        write_gray16_png(&dir.path().join("d.png"), &Grid::filled(3, 2, 1000u16)).unwrap();
        write_rgb8_png(&dir.path().join("i.png"), &Grid::filled(3, 2, [0.5; 3])).unwrap();
        let entry = SceneEntry {
            image_path: "i.png".into(),
            depth_path: "d.png".into(),
            fx: 3.0,
            fy: 3.0,
            cx: 1.0,
            cy: 0.5,
            depth_scale: 0.001,
        };
        let s = load_scene(&entry, dir.path()).unwrap();
        assert!(s.depth.iter().all(|d| (*d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mismatch_names_both_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_gray16_png(&dir.path().join("d.png"), &Grid::filled(3, 3, 1000u16)).unwrap();
        write_rgb8_png(&dir.path().join("i.png"), &Grid::filled(3, 2, [0.5; 3])).unwrap();
        let entry = SceneEntry {
            image_path: "i.png".into(),
            depth_path: "d.png".into(),
            fx: 3.0,
            fy: 3.0,
            cx: 1.0,
            cy: 0.5,
            depth_scale: 0.001,
        };
        let msg = load_scene(&entry, dir.path()).unwrap_err().to_string();
        assert!(msg.contains("d.png") && msg.contains("i.png"), "{msg}");
    }

    #[test]
    fn nonpositive_depth_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let raw = Grid::from_fn(10, 10, |c, r| if c == 0 && r == 0 { 0u16 } else { 500 + (c * 10 + r) as u16 });
        write_gray16_png(&dir.path().join("d.png"), &raw).unwrap();
        write_rgb8_png(&dir.path().join("i.png"), &Grid::filled(10, 10, [0.5; 3])).unwrap();
        let entry = SceneEntry {
            image_path: "i.png".into(),
            depth_path: "d.png".into(),
            fx: 3.0,
            fy: 3.0,
            cx: 1.0,
            cy: 0.5,
            depth_scale: 0.01,
        };
        let s = load_scene(&entry, dir.path()).unwrap();
        assert!((*s.depth.get(0, 0) - 5.01).abs() < 1e-9);
    }

    #[test]
    fn sixteen_bit_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let first = save_scene(dir.path(), "a", &scene(), 0.001).unwrap();
        let loaded = load_scene(&first, dir.path()).unwrap();
        let second = save_scene(dir.path(), "b", &loaded, 0.001).unwrap();
        let again = load_scene(&second, dir.path()).unwrap();
        assert_eq!(loaded, again);
        for (x, y) in [("a.png", "b.png"), ("a_depth.png", "b_depth.png")] {
            assert_eq!(std::fs::read(dir.path().join(x)).unwrap(), std::fs::read(dir.path().join(y)).unwrap());
        }
        let manifest = SceneManifest { scenes: vec![first] };
        manifest.save(&dir.path().join("m.toml")).unwrap();
        let (m, base) = SceneManifest::load(&dir.path().join("m.toml")).unwrap();
        assert_eq!(m.load_all(&base).unwrap()[0], loaded);
    }

    #[test]
    fn pfm_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = scene().depth;
        write_pfm(&dir.path().join("d.pfm"), &d).unwrap();
        let back = read_pfm(&dir.path().join("d.pfm")).unwrap();
        for (a, b) in d.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let m = Grid::from_fn(11, 3, |c, r| (c + r) % 3 == 0);
        write_mask_png(&dir.path().join("m.png"), &m).unwrap();
        assert_eq!(read_mask_png(&dir.path().join("m.png")).unwrap(), m);
    }

    #[test]
    fn checkpoint_and_config_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 17,
            seed: 5,
            ..TrainConfig::default()
        };
        let text = config_to_string(&cfg).unwrap();
        assert!(text.contains("lambda_reg") && text.contains("tau_theta"));
        assert_eq!(parse_config(&text).unwrap(), cfg);
        let pred = TinyConv::new(4, 9).unwrap();
        let path = dir.path().join("k.ckpt");
        write_checkpoint(&path, &pred, &cfg).unwrap();
        let (back, cfg2) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.kind(), PredictorKind::TinyConv);
        for (a, b) in pred.params().iter().zip(back.params()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        std::fs::write(dir.path().join("bad"), b"nope").unwrap();
        assert!(read_checkpoint(&dir.path().join("bad")).is_err());
    }
}
