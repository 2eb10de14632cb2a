//! Label handling and corpora: three-valued CSV labels with blanks,
//! uncertainty-label strategies, deterministic splits, binary PGM image
//! I/O, and generation of the synthetic in-distribution and
//! out-of-distribution image sets used for desk-scale experiments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-entry annotation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelCode {
    /// Finding present (1).
    Pos,
    /// Finding absent (0).
    Neg,
    /// Annotated as uncertain (-1).
    Unc,
    /// Not mentioned at all (empty cell).
    Blank,
}

/// N×C matrix of [`LabelCode`]s plus the class names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub class_names: Vec<String>,
    codes: Vec<LabelCode>,
}

impl LabelMatrix {
    pub fn new(class_names: Vec<String>, codes: Vec<LabelCode>) -> Self {
        assert!(!class_names.is_empty(), "label matrix needs at least one class");
        assert_eq!(
            codes.len() % class_names.len(),
            0,
            "code count {} not a multiple of class count {}",
            codes.len(),
            class_names.len()
        );
        LabelMatrix { class_names, codes }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n(&self) -> usize {
        self.codes.len() / self.classes()
    }

    pub fn get(&self, sample: usize, class: usize) -> LabelCode {
        self.codes[sample * self.classes() + class]
    }

    pub fn set(&mut self, sample: usize, class: usize, code: LabelCode) {
        let c = self.classes();
        self.codes[sample * c + class] = code;
    }

    pub fn codes(&self) -> &[LabelCode] {
        &self.codes
    }

    pub fn take_rows(&self, indices: &[usize]) -> LabelMatrix {
        let c = self.classes();
        let mut codes = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            codes.extend_from_slice(&self.codes[i * c..(i + 1) * c]);
        }
        LabelMatrix::new(self.class_names.clone(), codes)
    }
}

/// Handling rule for `-1` annotations before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Keep -1: masked out of the BCE term, kept for the evidential term.
    UMask,
    /// Remap -1 to negative.
    UZero,
    /// Remap -1 to positive.
    UOne,
    /// Exclude -1 entirely (treated as unmentioned).
    UIgnore,
}

impl Strategy {
    pub fn from_name(name: &str) -> Result<Strategy> {
        match name {
            "u-mask" => Ok(Strategy::UMask),
            "u-zero" => Ok(Strategy::UZero),
            "u-one" => Ok(Strategy::UOne),
            "u-ignore" => Ok(Strategy::UIgnore),
            other => Err(Error::config(format!(
                "key `strategy`: expected one of u-mask|u-zero|u-one|u-ignore, got `{other}`"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::UMask => "u-mask",
            Strategy::UZero => "u-zero",
            Strategy::UOne => "u-one",
            Strategy::UIgnore => "u-ignore",
        }
    }
}

/// Rewrites uncertain entries according to `strategy`; definite and blank
/// entries pass through untouched.
pub fn apply_strategy(labels: &LabelMatrix, strategy: Strategy) -> LabelMatrix {
    let mapped = labels
        .codes
        .iter()
        .map(|&code| match (code, strategy) {
            (LabelCode::Unc, Strategy::UZero) => LabelCode::Neg,
            (LabelCode::Unc, Strategy::UOne) => LabelCode::Pos,
            (LabelCode::Unc, Strategy::UIgnore) => LabelCode::Blank,
            (c, _) => c,
        })
        .collect();
    LabelMatrix::new(labels.class_names.clone(), mapped)
}

/// Per-class tallies of the four codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub pos: usize,
    pub neg: usize,
    pub unc: usize,
    pub blank: usize,
}

pub fn class_distribution(labels: &LabelMatrix) -> Vec<ClassCounts> {
    let mut out = vec![ClassCounts::default(); labels.classes()];
    for i in 0..labels.n() {
        for (c, counts) in out.iter_mut().enumerate() {
            match labels.get(i, c) {
                LabelCode::Pos => counts.pos += 1,
                LabelCode::Neg => counts.neg += 1,
                LabelCode::Unc => counts.unc += 1,
                LabelCode::Blank => counts.blank += 1,
            }
        }
    }
    out
}

/// An on-disk corpus: a directory, relative image paths, and labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub image_paths: Vec<String>,
    pub labels: LabelMatrix,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.image_paths.len()
    }

    /// Reads `labels.csv` under `dir`. Image files are not touched here;
    /// a missing image surfaces when it is first read.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let csv = dir.join("labels.csv");
        let (image_paths, labels) = load_csv(&csv)?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            image_paths,
            labels,
        })
    }

    pub fn image_file(&self, i: usize) -> PathBuf {
        self.dir.join(&self.image_paths[i])
    }

    /// Decodes image `i` to normalized intensities in [0, 1].
    pub fn image_pixels(&self, i: usize) -> Result<(usize, usize, Vec<f64>)> {
        let path = self.image_file(i);
        let (w, h, bytes) = read_pgm(&path)?;
        Ok((h, w, bytes.iter().map(|&b| f64::from(b) / 255.0).collect()))
    }

    /// Decodes every image into one [N, 1, H, W] tensor, requiring a
    /// uniform size across the corpus.
    pub fn load_images(&self) -> Result<Tensor> {
        assert!(self.n() > 0, "cannot load images of an empty dataset");
        let (h0, w0, first) = self.image_pixels(0)?;
        let mut data = Vec::with_capacity(self.n() * h0 * w0);
        data.extend_from_slice(&first);
        for i in 1..self.n() {
            let (h, w, pixels) = self.image_pixels(i)?;
            if (h, w) != (h0, w0) {
                return Err(Error::Parse {
                    location: self.image_file(i).display().to_string(),
                    msg: format!("image is {w}x{h}, expected {w0}x{h0}"),
                });
            }
            data.extend_from_slice(&pixels);
        }
        Ok(Tensor::new(vec![self.n(), 1, h0, w0], data))
    }

    /// Loads the row subset `indices` as one image tensor.
    pub fn load_image_batch(&self, indices: &[usize]) -> Result<Tensor> {
        assert!(!indices.is_empty());
        let (h0, w0, _) = self.image_pixels(indices[0])?;
        let mut data = Vec::with_capacity(indices.len() * h0 * w0);
        for &i in indices {
            let (h, w, pixels) = self.image_pixels(i)?;
            if (h, w) != (h0, w0) {
                return Err(Error::Parse {
                    location: self.image_file(i).display().to_string(),
                    msg: format!("image is {w}x{h}, expected {w0}x{h0}"),
                });
            }
            data.extend_from_slice(&pixels);
        }
        Ok(Tensor::new(vec![indices.len(), 1, h0, w0], data))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dir: self.dir.clone(),
            image_paths: indices.iter().map(|&i| self.image_paths[i].clone()).collect(),
            labels: self.labels.take_rows(indices),
        }
    }
}

/// Shuffled prefix split parameters.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.96,
            seed: 0,
        }
    }
}

/// Seeded shuffle then prefix cut; both halves are non-empty.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> (Dataset, Dataset) {
    let n = ds.n();
    assert!(n >= 2, "split needs at least two samples, got {n}");
    assert!(
        spec.train_fraction > 0.0 && spec.train_fraction < 1.0,
        "train_fraction must lie strictly between 0 and 1"
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut order);
    let cut = ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n - 1);
    (ds.subset(&order[..cut]), ds.subset(&order[cut..]))
}

fn code_to_cell(code: LabelCode) -> &'static str {
    match code {
        LabelCode::Pos => "1.0",
        LabelCode::Neg => "0.0",
        LabelCode::Unc => "-1.0",
        LabelCode::Blank => "",
    }
}

fn cell_to_code(cell: &str) -> Option<LabelCode> {
    match cell {
        "1.0" | "1" => Some(LabelCode::Pos),
        "0.0" | "0" => Some(LabelCode::Neg),
        "-1.0" | "-1" => Some(LabelCode::Unc),
        "" => Some(LabelCode::Blank),
        _ => None,
    }
}

/// Writes `Path,<classes...>` rows with cells `1.0` / `0.0` / `-1.0` / empty.
pub fn write_csv(path: &Path, image_paths: &[String], labels: &LabelMatrix) -> Result<()> {
    assert_eq!(image_paths.len(), labels.n(), "row count mismatch");
    let mut out = String::from("Path");
    for name in &labels.class_names {
        assert!(
            !name.contains(',') && !name.contains('\n'),
            "class name `{name}` is not representable in the CSV header"
        );
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, img) in image_paths.iter().enumerate() {
        out.push_str(img);
        for c in 0..labels.classes() {
            out.push(',');
            out.push_str(code_to_cell(labels.get(i, c)));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a label CSV; the header row names `Path` then the classes.
pub fn load_csv(path: &Path) -> Result<(Vec<String>, LabelMatrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            location: format!("{} row 1", path.display()),
            msg: "missing header row".to_string(),
        });
    };
    let mut fields = header.split(',');
    let first = fields.next().unwrap_or("");
    if first != "Path" {
        return Err(Error::Parse {
            location: format!("{} row 1 column 1", path.display()),
            msg: format!("header must start with `Path`, got `{first}`"),
        });
    }
    let class_names: Vec<String> = fields.map(str::to_string).collect();
    if class_names.is_empty() {
        return Err(Error::Parse {
            location: format!("{} row 1", path.display()),
            msg: "header names no class columns".to_string(),
        });
    }
    let c = class_names.len();
    let mut image_paths = Vec::new();
    let mut codes = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != c + 1 {
            return Err(Error::Parse {
                location: format!("{} row {row}", path.display()),
                msg: format!("expected {} comma-separated cells, got {}", c + 1, cells.len()),
            });
        }
        image_paths.push(cells[0].to_string());
        for (j, cell) in cells[1..].iter().enumerate() {
            match cell_to_code(cell) {
                Some(code) => codes.push(code),
                None => {
                    return Err(Error::Parse {
                        location: format!("{} row {row} column {}", path.display(), j + 2),
                        msg: format!("unknown label token `{cell}`"),
                    })
                }
            }
        }
    }
    Ok((image_paths, LabelMatrix::new(class_names, codes)))
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    assert_eq!(bytes.len(), width * height, "pixel buffer size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM (P5), tolerating comments and any whitespace
/// between header tokens.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse {
        location: path.display().to_string(),
        msg,
    };
    let mut pos = 0usize;
    let token = |raw: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < raw.len() {
            let b = raw[*pos];
            if b == b'#' {
                while *pos < raw.len() && raw[*pos] != b'\n' {
                    *pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                *pos += 1;
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header".to_string()));
        }
        Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
    };
    let magic = token(&raw, &mut pos)?;
    if magic != "P5" {
        return Err(bad(format!("expected magic P5, got `{magic}`")));
    }
    let width: usize = token(&raw, &mut pos)?
        .parse()
        .map_err(|_| bad("bad width".to_string()))?;
    let height: usize = token(&raw, &mut pos)?
        .parse()
        .map_err(|_| bad("bad height".to_string()))?;
    let maxval: usize = token(&raw, &mut pos)?
        .parse()
        .map_err(|_| bad("bad maxval".to_string()))?;
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, got {maxval}")));
    }
    pos += 1;
    let need = width * height;
    if raw.len() < pos + need {
        return Err(bad(format!(
            "pixel payload truncated: need {need} bytes, have {}",
            raw.len().saturating_sub(pos)
        )));
    }
    Ok((width, height, raw[pos..pos + need].to_vec()))
}

const IN_DIST_FAMILIES: [&str; 5] = ["disc", "ring", "cross", "box", "blob"];

fn class_name(c: usize) -> String {
    if c < IN_DIST_FAMILIES.len() {
        IN_DIST_FAMILIES[c].to_string()
    } else {
        format!("class_{c}")
    }
}

const BACKGROUND: f64 = 0.12;
const NOISE_SIGMA: f64 = 0.05;

fn smooth_step(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Adds one shape of the class' family onto the intensity buffer.
fn draw_shape(buf: &mut [f64], size: usize, family: usize, cy: f64, cx: f64, r: f64, amp: f64) {
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let d = (dy * dy + dx * dx).sqrt();
            let weight = match family % IN_DIST_FAMILIES.len() {
                0 => smooth_step(r - d + 0.5),
                1 => {
                    let inner = 0.6 * r;
                    smooth_step(r - d + 0.5).min(smooth_step(d - inner + 0.5))
                }
                2 => {
                    let bar = (0.25 * r).max(1.0);
                    let in_box = smooth_step(r - dy.abs() + 0.5).min(smooth_step(r - dx.abs() + 0.5));
                    let arms =
                        smooth_step(bar - dy.abs() + 0.5).max(smooth_step(bar - dx.abs() + 0.5));
                    in_box.min(arms)
                }
                3 => {
                    let m = dy.abs().max(dx.abs());
                    smooth_step(r - m + 0.5).min(smooth_step(m - 0.7 * r + 0.5))
                }
                _ => {
                    let s = 0.6 * r;
                    (-0.5 * (d / s) * (d / s)).exp()
                }
            };
            buf[y * size + x] += amp * weight;
        }
    }
}

fn finish_image(buf: &mut [f64], rng: &mut Rng) -> Vec<u8> {
    buf.iter_mut()
        .map(|v| {
            let noisy = (*v + BACKGROUND + rng.normal_with(0.0, NOISE_SIGMA)).clamp(0.0, 1.0);
            (noisy * 255.0).round() as u8
        })
        .collect()
}

fn write_manifest(dir: &Path, cfg: &SynthConfig, kind: &str) -> Result<()> {
    let path = dir.join("manifest.txt");
    let text = format!("kind = {kind}\n{}", cfg.echo_text());
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Renders the in-distribution corpus into `dir`: one PGM per sample plus
/// `labels.csv` and a manifest echoing the resolved settings.
///
/// Per (sample, class) entry: a Bernoulli draw at the class prevalence
/// picks tentative presence, then an independent `uncertain_frac` draw
/// turns the entry uncertain, rendering its shape at a contrast too low to
/// call and labeling it -1. Positive entries render at full contrast,
/// negative ones render nothing.
pub fn generate_synthetic(dir: &Path, cfg: &SynthConfig, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = cfg.image_size;
    let prevalence = cfg.prevalence();
    let class_names: Vec<String> = (0..cfg.classes).map(class_name).collect();
    let mut image_paths = Vec::with_capacity(cfg.n);
    let mut codes = Vec::with_capacity(cfg.n * cfg.classes);
    let mut buf = vec![0.0; size * size];
    for i in 0..cfg.n {
        buf.fill(0.0);
        for (c, &prev) in prevalence.iter().enumerate() {
            let tentative_pos = rng.chance(prev);
            let uncertain = rng.chance(cfg.uncertain_frac);
            let (code, amp_range) = if uncertain {
                (LabelCode::Unc, Some((0.07, 0.2)))
            } else if tentative_pos {
                (LabelCode::Pos, Some((0.5, 0.9)))
            } else {
                (LabelCode::Neg, None)
            };
            codes.push(code);
            if let Some((lo, hi)) = amp_range {
                let amp = rng.uniform_in(lo, hi);
                let cy = rng.uniform_in(0.3 * size as f64, 0.7 * size as f64);
                let cx = rng.uniform_in(0.3 * size as f64, 0.7 * size as f64);
                let r = rng.uniform_in(0.12 * size as f64, 0.22 * size as f64);
                draw_shape(&mut buf, size, c, cy, cx, r, amp);
            }
        }
        let bytes = finish_image(&mut buf, rng);
        let name = format!("img_{i:05}.pgm");
        write_pgm(&dir.join(&name), size, size, &bytes)?;
        image_paths.push(name);
    }
    let labels = LabelMatrix::new(class_names, codes);
    write_csv(&dir.join("labels.csv"), &image_paths, &labels)?;
    write_manifest(dir, cfg, "in-dist")?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        image_paths,
        labels,
    })
}

/// Renders the out-of-distribution corpus: stripe and checkerboard
/// textures, families never used in-distribution, every label blank.
/// Texture contrast sits below the in-distribution positive-shape range
/// so the corpus differs in structure, not gross brightness.
pub fn generate_ood(dir: &Path, cfg: &SynthConfig, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = cfg.image_size;
    let class_names: Vec<String> = (0..cfg.classes).map(class_name).collect();
    let mut image_paths = Vec::with_capacity(cfg.n);
    let mut buf = vec![0.0; size * size];
    for i in 0..cfg.n {
        buf.fill(0.0);
        let amp = rng.uniform_in(0.06, 0.14);
        if i % 2 == 0 {
            let period = rng.uniform_in(4.0, 9.0);
            let angle = rng.uniform_in(0.0, std::f64::consts::PI);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            let (sin_a, cos_a) = angle.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let proj = y as f64 * cos_a + x as f64 * sin_a;
                    let wave = (std::f64::consts::TAU * proj / period + phase).sin();
                    buf[y * size + x] = amp * 0.5 * (1.0 + wave);
                }
            }
        } else {
            let cell = 3 + rng.below(4);
            let oy = rng.below(cell);
            let ox = rng.below(cell);
            for y in 0..size {
                for x in 0..size {
                    if (((y + oy) / cell) + ((x + ox) / cell)) % 2 == 0 {
                        buf[y * size + x] = amp;
                    }
                }
            }
        }
        let bytes = finish_image(&mut buf, rng);
        let name = format!("ood_{i:05}.pgm");
        write_pgm(&dir.join(&name), size, size, &bytes)?;
        image_paths.push(name);
    }
    let labels = LabelMatrix::new(
        class_names,
        vec![LabelCode::Blank; cfg.n * cfg.classes],
    );
    write_csv(&dir.join("labels.csv"), &image_paths, &labels)?;
    write_manifest(dir, cfg, "ood")?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        image_paths,
        labels,
    })
}
