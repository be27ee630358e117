//! Dataset loading and generation: binary PGM image trees, SPK1 event
//! files, the synthetic glyph generator, and Gaussian noise injection.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("resolution must be at least 16, got {0}")]
    ResolutionTooSmall(usize),
    #[error("could not synthesize {0} separable class templates")]
    TemplatesTooClose(usize),
    #[error("dataset at {0} contains no classes")]
    Empty(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// `[C,H,W]` items in [0,1], replicated over time by the encoder.
    Static,
    /// `[T,C,H,W]` binary items with a native time axis.
    Event,
}

pub struct Item {
    pub tensor: Tensor,
    pub class: usize,
}

/// In-memory dataset with class-name bookkeeping. Class ids follow sorted
/// class-name order, so they are stable under directory reshuffling.
pub struct Dataset {
    kind: DatasetKind,
    classes: Vec<String>,
    items: Vec<Item>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_parts(kind: DatasetKind, classes: Vec<String>, items: Vec<Item>) -> Self {
        let mut by_class = vec![Vec::new(); classes.len()];
        for (i, item) in items.iter().enumerate() {
            by_class[item.class].push(i);
        }
        Dataset {
            kind,
            classes,
            items,
            by_class,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_name(&self, id: usize) -> &str {
        &self.classes[id]
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn class_items(&self, id: usize) -> &[usize] {
        &self.by_class[id]
    }

    pub fn item(&self, idx: usize) -> &Item {
        &self.items[idx]
    }

    pub fn item_shape(&self) -> &[usize] {
        self.items[0].tensor.shape()
    }
}

// ── PGM codec (binary P5, 8-bit) ─────────────────────────────────────

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<(), DataError> {
    assert_eq!(data.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| io_err(path, e))
}

/// Reads a binary PGM; pixel values are scaled into [0,1] by the header's
/// maxval.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let mut next_token = |what: &str| -> Result<String, DataError> {
        // skip whitespace and '#' comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, format!("truncated header while reading {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token("magic")? != "P5" {
        return Err(format_err(path, "not a binary PGM (expected P5)"));
    }
    let width: usize = next_token("width")?
        .parse()
        .map_err(|_| format_err(path, "bad width"))?;
    let height: usize = next_token("height")?
        .parse()
        .map_err(|_| format_err(path, "bad height"))?;
    let maxval: usize = next_token("maxval")?
        .parse()
        .map_err(|_| format_err(path, "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval} (8-bit only)")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(format_err(path, "truncated pixel payload"));
    }
    let data = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok((width, height, data))
}

// ── SPK1 event codec ─────────────────────────────────────────────────

pub const SPK_MAGIC: &[u8; 4] = b"SPK1";

pub fn write_spk(path: &Path, shape: [usize; 4], spikes: &[f64]) -> Result<(), DataError> {
    assert_eq!(spikes.len(), shape.iter().product::<usize>());
    let mut buf = Vec::with_capacity(20 + spikes.len());
    buf.extend_from_slice(SPK_MAGIC);
    for d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in spikes {
        buf.push(if v != 0.0 { 1 } else { 0 });
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| io_err(path, e))
}

/// Reads one SPK1 file into a `[T,C,H,W]` binary tensor.
pub fn read_spk(path: &Path) -> Result<Tensor, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != SPK_MAGIC {
        return Err(format_err(path, "bad magic (expected SPK1)"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    if n == 0 {
        return Err(format_err(path, format!("degenerate shape {dims:?}")));
    }
    if bytes.len() != 20 + n {
        return Err(format_err(
            path,
            format!("payload is {} bytes, header implies {}", bytes.len() - 20, n),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for &b in &bytes[20..] {
        match b {
            0 => data.push(0.0),
            1 => data.push(1.0),
            other => {
                return Err(format_err(path, format!("spike byte must be 0 or 1, found {other}")))
            }
        }
    }
    Ok(Tensor::from_vec(&dims, data).expect("length checked"))
}

// ── directory tree loaders ───────────────────────────────────────────

fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort_by(|a, b| a.0.cmp(&b.0));
    if dirs.is_empty() {
        return Err(DataError::Empty(root.display().to_string()));
    }
    Ok(dirs)
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == ext).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `root/<class>/<item>.pgm` as a static grayscale dataset, resized
/// to `resolution x resolution`. Inputs must be square.
pub fn load_image_dataset(root: &Path, resolution: usize) -> Result<Dataset, DataError> {
    if resolution < 16 {
        return Err(DataError::ResolutionTooSmall(resolution));
    }
    let mut classes = Vec::new();
    let mut items = Vec::new();
    for (cid, (name, dir)) in class_dirs(root)?.into_iter().enumerate() {
        classes.push(name);
        for file in files_with_extension(&dir, "pgm")? {
            let (w, h, data) = read_pgm(&file)?;
            if w != h {
                return Err(format_err(
                    &file,
                    format!("image is {w}x{h}; square inputs required for square resize"),
                ));
            }
            let resized = if w == resolution {
                data
            } else {
                resize_bilinear(&data, w, resolution)
            };
            items.push(Item {
                tensor: Tensor::from_vec(&[1, resolution, resolution], resized)
                    .expect("resized length"),
                class: cid,
            });
        }
    }
    Ok(Dataset::from_parts(DatasetKind::Static, classes, items))
}

/// Loads `root/<class>/<item>.spk` as an event dataset. Every file must
/// agree on `[T,C,H,W]`.
pub fn load_event_dataset(root: &Path) -> Result<Dataset, DataError> {
    let mut classes = Vec::new();
    let mut items = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for (cid, (name, dir)) in class_dirs(root)?.into_iter().enumerate() {
        classes.push(name);
        for file in files_with_extension(&dir, "spk")? {
            let tensor = read_spk(&file)?;
            match &shape {
                None => shape = Some(tensor.shape().to_vec()),
                Some(s) if s.as_slice() != tensor.shape() => {
                    return Err(format_err(
                        &file,
                        format!("event shape {:?} differs from {:?}", tensor.shape(), s),
                    ));
                }
                _ => {}
            }
            items.push(Item {
                tensor,
                class: cid,
            });
        }
    }
    Ok(Dataset::from_parts(DatasetKind::Event, classes, items))
}

fn resize_bilinear(data: &[f64], src: usize, dst: usize) -> Vec<f64> {
    let mut out = vec![0.0; dst * dst];
    let scale = src as f64 / dst as f64;
    for y in 0..dst {
        for x in 0..dst {
            let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(src - 1), (x0 + 1).min(src - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            out[y * dst + x] = data[y0 * src + x0] * (1.0 - fy) * (1.0 - fx)
                + data[y0 * src + x1] * (1.0 - fy) * fx
                + data[y1 * src + x0] * fy * (1.0 - fx)
                + data[y1 * src + x1] * fy * fx;
        }
    }
    out
}

// ── synthetic glyphs ─────────────────────────────────────────────────

/// Minimum L2 distance between accepted class templates, scaled to the
/// resolution.
pub fn template_separation_floor(resolution: usize) -> f64 {
    resolution as f64 / 8.0
}

/// Generates a character-like glyph dataset. Classes are compositions of
/// strokes drawn from one shared bank (the way characters share radicals),
/// so different classes overlap in local structure and telling them apart
/// requires the arrangement, not a single distinctive mark. Items are the
/// class template under random affine jitter plus pixel noise. Templates
/// are rejection-sampled until every pair is at least
/// [`template_separation_floor`] apart in L2.
pub fn make_synthetic_glyphs(
    num_classes: usize,
    per_class: usize,
    resolution: usize,
    rng: &mut Rng,
) -> Result<Dataset, DataError> {
    if resolution < 16 {
        return Err(DataError::ResolutionTooSmall(resolution));
    }
    let floor = template_separation_floor(resolution);
    let bank = StrokeBank::generate(rng);
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    'classes: for _ in 0..num_classes {
        for _attempt in 0..200 {
            let candidate = bank.compose_template(resolution, rng);
            let separated = templates.iter().all(|t| l2_distance(t, &candidate) >= floor);
            if separated {
                templates.push(candidate);
                continue 'classes;
            }
        }
        return Err(DataError::TemplatesTooClose(num_classes));
    }
    let mut classes = Vec::with_capacity(num_classes);
    let mut items = Vec::with_capacity(num_classes * per_class);
    for (cid, template) in templates.iter().enumerate() {
        classes.push(format!("glyph_{cid:03}"));
        for _ in 0..per_class {
            let jittered = jitter(template, resolution, rng);
            items.push(Item {
                tensor: Tensor::from_vec(&[1, resolution, resolution], jittered)
                    .expect("resolution square"),
                class: cid,
            });
        }
    }
    Ok(Dataset::from_parts(DatasetKind::Static, classes, items))
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A shared vocabulary of stroke primitives in normalized coordinates.
struct StrokeBank {
    /// Each stroke is a short polyline within the unit square.
    strokes: Vec<Vec<(f64, f64)>>,
}

impl StrokeBank {
    const SIZE: usize = 10;
    const STROKES_PER_GLYPH: usize = 3;

    fn generate(rng: &mut Rng) -> Self {
        let strokes = (0..Self::SIZE)
            .map(|_| {
                let segments = 1 + rng.below(2);
                let mut pts = vec![(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9))];
                for _ in 0..segments {
                    pts.push((rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)));
                }
                pts
            })
            .collect();
        StrokeBank { strokes }
    }

    /// A class template: a few bank strokes, each shrunk and dropped at a
    /// class-specific position. Many classes share strokes; placement and
    /// combination carry the identity.
    fn compose_template(&self, resolution: usize, rng: &mut Rng) -> Vec<f64> {
        let r = resolution as f64;
        let mut img = vec![0.0; resolution * resolution];
        let thickness = (r / 16.0).max(1.2);
        let picks = rng.sample_indices(Self::SIZE, Self::STROKES_PER_GLYPH);
        for stroke_idx in picks {
            let stroke = &self.strokes[stroke_idx];
            // class-specific placement of the shared stroke
            let scale = rng.uniform(0.35, 0.6) * r;
            let oy = rng.uniform(0.05 * r, 0.95 * r - scale * 0.8);
            let ox = rng.uniform(0.05 * r, 0.95 * r - scale * 0.8);
            let mut prev = (oy + stroke[0].0 * scale * 0.8, ox + stroke[0].1 * scale * 0.8);
            for p in &stroke[1..] {
                let next = (oy + p.0 * scale * 0.8, ox + p.1 * scale * 0.8);
                stamp_segment(&mut img, resolution, prev, next, thickness);
                prev = next;
            }
        }
        img
    }
}

fn stamp_segment(
    img: &mut [f64],
    resolution: usize,
    from: (f64, f64),
    to: (f64, f64),
    thickness: f64,
) {
    let steps = ((to.0 - from.0).hypot(to.1 - from.1) * 2.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let cy = from.0 + t * (to.0 - from.0);
        let cx = from.1 + t * (to.1 - from.1);
        let lo_y = (cy - thickness).floor().max(0.0) as usize;
        let hi_y = ((cy + thickness).ceil() as usize).min(resolution - 1);
        let lo_x = (cx - thickness).floor().max(0.0) as usize;
        let hi_x = ((cx + thickness).ceil() as usize).min(resolution - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let d = (y as f64 - cy).hypot(x as f64 - cx);
                if d <= thickness {
                    img[y * resolution + x] = 1.0;
                }
            }
        }
    }
}

/// Random rotation/scale/translation via inverse-mapped bilinear
/// sampling, a distractor stroke, and additive pixel noise. The jitter is
/// strong enough that pixel-space matching alone does not solve the task,
/// and the per-item distractor adds class-irrelevant structure that a
/// matcher must learn to ignore.
fn jitter(template: &[f64], resolution: usize, rng: &mut Rng) -> Vec<f64> {
    let r = resolution as f64;
    let angle = rng.uniform(-0.28, 0.28);
    let scale = rng.uniform(0.85, 1.15);
    let dy = rng.uniform(-r / 8.0, r / 8.0);
    let dx = rng.uniform(-r / 8.0, r / 8.0);
    let (sin, cos) = angle.sin_cos();
    let c = (r - 1.0) / 2.0;
    let mut out = vec![0.0; resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            // inverse transform of the output pixel into template space
            let oy = y as f64 - c - dy;
            let ox = x as f64 - c - dx;
            let sy = (cos * oy + sin * ox) / scale + c;
            let sx = (-sin * oy + cos * ox) / scale + c;
            if sy < 0.0 || sx < 0.0 || sy > r - 1.0 || sx > r - 1.0 {
                continue;
            }
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(resolution - 1), (x0 + 1).min(resolution - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            out[y * resolution + x] = template[y0 * resolution + x0] * (1.0 - fy) * (1.0 - fx)
                + template[y0 * resolution + x1] * (1.0 - fy) * fx
                + template[y1 * resolution + x0] * fy * (1.0 - fx)
                + template[y1 * resolution + x1] * fy * fx;
        }
    }
    // clutter stroke, independent of the class
    if rng.next_f64() < 0.75 {
        let from = (rng.uniform(0.1 * r, 0.9 * r), rng.uniform(0.1 * r, 0.9 * r));
        let to = (rng.uniform(0.1 * r, 0.9 * r), rng.uniform(0.1 * r, 0.9 * r));
        stamp_segment(&mut out, resolution, from, to, (r / 16.0).max(1.2));
    }
    for v in &mut out {
        *v = (*v + 0.06 * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

/// `out = clamp(in + rate * g, 0, 1)` with `g` standard normal per
/// element; a rate of zero returns the input bit-for-bit.
pub fn add_gaussian_noise(item: &Tensor, spec: super::NoiseSpec, rng: &mut Rng) -> Tensor {
    if spec.rate == 0.0 {
        return item.clone();
    }
    let data = item
        .data()
        .iter()
        .map(|&v| (v + spec.rate * rng.normal()).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(item.shape(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("sscf_data_tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgm_roundtrip_and_normalization() {
        let dir = tmp_dir("pgm");
        let path = dir.join("x.pgm");
        let data = vec![0.0, 0.5, 1.0, 128.0 / 255.0];
        write_pgm(&path, 2, 2, &data).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert!((back[3] - 128.0 / 255.0).abs() < 1e-12, "maxval-255 pixel 128");
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        let dir = tmp_dir("pgm_bad");
        let path = dir.join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn spk_roundtrip_and_size_arithmetic() {
        let dir = tmp_dir("spk");
        let path = dir.join("x.spk");
        let shape = [4usize, 2, 8, 8];
        let n: usize = shape.iter().product();
        assert_eq!(n, 512, "header T=4,C=2,H=8,W=8 implies a 512-byte payload");
        let mut rng = Rng::new(70);
        let spikes: Vec<f64> = (0..n).map(|_| if rng.next_f64() < 0.2 { 1.0 } else { 0.0 }).collect();
        write_spk(&path, shape, &spikes).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 + 512);
        let back = read_spk(&path).unwrap();
        assert_eq!(back.shape(), &[4, 2, 8, 8]);
        assert_eq!(back.data(), &spikes[..]);
    }

    #[test]
    fn spk_all_zero_payload() {
        let dir = tmp_dir("spk_zero");
        let path = dir.join("z.spk");
        write_spk(&path, [2, 1, 4, 4], &vec![0.0; 32]).unwrap();
        let back = read_spk(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spk_rejects_bad_magic_and_bad_bytes() {
        let dir = tmp_dir("spk_bad");
        let p1 = dir.join("m.spk");
        std::fs::write(&p1, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00").unwrap();
        assert!(read_spk(&p1).is_err());
        let p2 = dir.join("v.spk");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SPK1");
        for d in [1u32, 1, 1, 1] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.push(7);
        std::fs::write(&p2, &buf).unwrap();
        assert!(read_spk(&p2).unwrap_err().to_string().contains("0 or 1"));
    }

    #[test]
    fn image_tree_loads_sorted_classes() {
        let dir = tmp_dir("tree");
        for class in ["beta", "alpha"] {
            let cdir = dir.join(class);
            std::fs::create_dir_all(&cdir).unwrap();
            for i in 0..3 {
                write_pgm(&cdir.join(format!("{i}.pgm")), 16, 16, &vec![0.25; 256]).unwrap();
            }
        }
        let ds = load_image_dataset(&dir, 16).unwrap();
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.class_name(0), "alpha");
        assert_eq!(ds.class_name(1), "beta");
        assert_eq!(ds.class_items(0).len(), 3);
    }

    #[test]
    fn glyphs_deterministic_and_separated() {
        let a = make_synthetic_glyphs(6, 4, 32, &mut Rng::new(5)).unwrap();
        let b = make_synthetic_glyphs(6, 4, 32, &mut Rng::new(5)).unwrap();
        assert_eq!(a.len(), 24);
        for i in 0..a.len() {
            assert_eq!(a.item(i).tensor.data(), b.item(i).tensor.data());
        }
        // pairwise distance scan over one representative item per class
        let floor = template_separation_floor(32);
        for i in 0..6 {
            for j in (i + 1)..6 {
                let x = a.item(a.class_items(i)[0]).tensor.data();
                let y = a.item(a.class_items(j)[0]).tensor.data();
                // items are jittered templates; allow the jitter to eat some
                // of the separation margin
                assert!(
                    l2_distance(x, y) > floor * 0.5,
                    "classes {i} and {j} too close"
                );
            }
        }
    }

    #[test]
    fn glyph_resolution_floor() {
        assert!(matches!(
            make_synthetic_glyphs(2, 1, 15, &mut Rng::new(1)),
            Err(DataError::ResolutionTooSmall(15))
        ));
        assert!(make_synthetic_glyphs(2, 1, 16, &mut Rng::new(1)).is_ok());
    }

    #[test]
    fn noise_identity_determinism_and_range() {
        let item = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.5, 0.9, 1.0]).unwrap();
        let zero = add_gaussian_noise(&item, super::super::NoiseSpec { rate: 0.0 }, &mut Rng::new(2));
        assert_eq!(zero.data(), item.data());
        let a = add_gaussian_noise(&item, super::super::NoiseSpec { rate: 0.4 }, &mut Rng::new(2));
        let b = add_gaussian_noise(&item, super::super::NoiseSpec { rate: 0.4 }, &mut Rng::new(2));
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(a.data(), item.data());
    }
}
