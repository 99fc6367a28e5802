//! Dataset ingestion, masks, column sampling and image round-tripping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{unvec, vec, DenseMatrix};
use crate::model::Observation;

/// Data matrix `Y` (m×n, one item per column) with a binary observation mask.
#[derive(Debug, Clone)]
pub struct MaskedDataset {
    y: DenseMatrix,
    mask: DenseMatrix,
    names: Option<Vec<String>>,
}

impl MaskedDataset {
    pub fn new(y: DenseMatrix, mask: DenseMatrix) -> Result<Self> {
        if y.shape() != mask.shape() {
            return Err(Error::dims(
                "MaskedDataset::new",
                format!("{:?}", y.shape()),
                format!("{:?}", mask.shape()),
            ));
        }
        if mask.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("mask entries must be exactly 0 or 1".into()));
        }
        Ok(Self { y, mask, names: None })
    }

    pub fn fully_observed(y: DenseMatrix) -> Self {
        let mask = DenseMatrix::from_fn(y.rows(), y.cols(), |_, _| 1.0);
        Self { y, mask, names: None }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n() {
            return Err(Error::dims("MaskedDataset::with_names", self.n(), names.len()));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.y.rows()
    }

    pub fn n(&self) -> usize {
        self.y.cols()
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.y
    }

    pub fn mask(&self) -> &DenseMatrix {
        &self.mask
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// `M ⊙ Y`: the data with missing entries zero-filled.
    pub fn zero_filled(&self) -> DenseMatrix {
        self.y.hadamard(&self.mask).expect("shapes checked at construction")
    }

    /// Column `j` as an observation. Fully observed columns carry no mask.
    pub fn observation(&self, j: usize) -> Observation {
        let y = self.y.column(j);
        let mask = self.mask.column(j);
        let mask = if mask.iter().all(|&v| v == 1.0) {
            None
        } else {
            Some(mask)
        };
        Observation::from_parts_unchecked(y, mask, j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// i.i.d. uniform draws over `[0, n)`.
    WithReplacement,
    /// Each column once per epoch, in a freshly shuffled order.
    EpochShuffle,
}

/// Column sampler. Cloning captures the full state, so a clone replays the
/// same sequence.
#[derive(Debug, Clone)]
pub struct SamplerState {
    mode: SamplingMode,
    seed: u64,
    position: usize,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
}

impl SamplerState {
    pub fn new(mode: SamplingMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            position: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: Vec::new(),
        }
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n >= 1, "sampler needs at least one column");
        match self.mode {
            SamplingMode::WithReplacement => {
                self.position += 1;
                self.rng.random_range(0..n)
            }
            SamplingMode::EpochShuffle => {
                if self.perm.len() != n || self.position >= n {
                    self.perm = (0..n).collect();
                    self.perm.shuffle(&mut self.rng);
                    self.position = 0;
                }
                let i = self.perm[self.position];
                self.position += 1;
                i
            }
        }
    }

    /// The next `count` indices.
    pub fn take(&mut self, n: usize, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.next_index(n)).collect()
    }
}

fn is_header_cell(s: &str) -> bool {
    s.trim().parse::<f64>().is_err()
}

/// Reads a comma-delimited numeric matrix. A first row containing any
/// non-numeric cell is taken as a header and skipped.
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(file)
}

pub fn parse_matrix_csv(reader: impl std::io::Read) -> Result<DenseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0;
    for (k, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            col: None,
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if k == 0 && record.iter().any(is_header_cell) {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse {
                    line,
                    col: None,
                    msg: format!("expected {c} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                col: Some(j + 1),
                msg: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    col: Some(j + 1),
                    msg: format!("non-finite value {cell:?}"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::Parse {
        line: 1,
        col: None,
        msg: "no numeric rows".into(),
    })?;
    DenseMatrix::new(rows, cols, data)
}

/// Writes the matrix with shortest round-trip float formatting.
pub fn save_matrix_csv(path: impl AsRef<Path>, a: &DenseMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..a.rows() {
        let line: Vec<String> = a.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct PnmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> PnmTokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b'\n' => {
                    self.line += 1;
                    self.pos += 1;
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            col: None,
            msg: msg.into(),
        }
    }

    fn uint(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Reads a P2 (ASCII) or P5 (binary) greymap, scaled to `[0, 1]`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut t = PnmTokens { bytes, pos: 0, line: 1 };
    let binary = match bytes.get(..2) {
        Some(b"P2") => false,
        Some(b"P5") => true,
        _ => return Err(t.err("missing P2/P5 magic number")),
    };
    t.pos = 2;
    let width = t.uint("width")? as usize;
    let height = t.uint("height")? as usize;
    let maxval = t.uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(t.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(t.err(format!("maxval {maxval} outside 1..=65535")));
    }
    let count = width * height;
    let mut pixels = Vec::with_capacity(count);
    if binary {
        match t.bytes.get(t.pos) {
            Some(c) if c.is_ascii_whitespace() => t.pos += 1,
            _ => return Err(t.err("expected whitespace before raster")),
        }
        let raster = &bytes[t.pos..];
        let wide = maxval > 255;
        let needed = if wide { 2 * count } else { count };
        if raster.len() < needed {
            return Err(t.err(format!("raster truncated: {} of {needed} bytes", raster.len())));
        }
        if wide {
            pixels.extend(
                raster[..needed]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32),
            );
        } else {
            pixels.extend(raster[..needed].iter().map(|&b| b as u32));
        }
    } else {
        for _ in 0..count {
            pixels.push(t.uint("pixel value")?);
        }
    }
    if let Some(p) = pixels.iter().find(|&&p| p > maxval) {
        return Err(t.err(format!("pixel value {p} exceeds maxval {maxval}")));
    }
    let scale = maxval as f64;
    DenseMatrix::new(height, width, pixels.into_iter().map(|p| p as f64 / scale).collect())
}

/// Writes a binary 8-bit greymap, mapping `[min, max]` linearly onto `[0, 255]`.
pub fn save_pgm(path: impl AsRef<Path>, a: &DenseMatrix, min: f64, max: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(a, min, max)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(a: &DenseMatrix, min: f64, max: f64) -> Result<Vec<u8>> {
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::Contract(format!("PGM intensity range [{min}, {max}] is empty")));
    }
    let mut out = format!("P5\n{} {}\n255\n", a.cols(), a.rows()).into_bytes();
    out.extend(a.as_slice().iter().map(|&v| {
        let t = (v.clamp(min, max) - min) / (max - min);
        (t * 255.0).round() as u8
    }));
    Ok(out)
}

/// Reads every `.pgm` under `dir` (recursively, sorted by path) into an
/// m×n matrix of column-vectorised images. Returns the image shape and names.
pub fn load_pgm_dir(dir: impl AsRef<Path>) -> Result<(DenseMatrix, (usize, usize), Vec<String>)> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_pgm(dir, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Contract(format!("no .pgm files found under {}", dir.display())));
    }
    let images = files.iter().map(load_pgm).collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape();
    let y = vectorise_images(&images)?;
    let names = files
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect();
    Ok((y, shape, names))
}

fn collect_pgm(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_pgm(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Stacks images as columns, each column-major vectorised.
pub fn vectorise_images(images: &[DenseMatrix]) -> Result<DenseMatrix> {
    let Some(first) = images.first() else {
        return Ok(DenseMatrix::zeros(0, 0));
    };
    let (h, w) = first.shape();
    let m = h * w;
    let n = images.len();
    let mut out = DenseMatrix::zeros(m, n);
    for (j, img) in images.iter().enumerate() {
        if img.shape() != (h, w) {
            return Err(Error::dims(
                "vectorise_images",
                format!("{h}x{w}"),
                format!("{}x{}", img.rows(), img.cols()),
            ));
        }
        out.set_column(j, &vec(img))?;
    }
    Ok(out)
}

pub fn devectorise_images(y: &DenseMatrix, height: usize, width: usize) -> Result<Vec<DenseMatrix>> {
    if y.rows() != height * width {
        return Err(Error::dims("devectorise_images", height * width, y.rows()));
    }
    (0..y.cols()).map(|j| unvec(&y.column(j), height, width)).collect()
}

/// Per column, zeroes contiguous runs of up to `block_len` entries at random
/// offsets until `⌈fraction·m⌉` entries are zero.
pub fn make_block_mask(m: usize, n: usize, fraction: f64, block_len: usize, seed: u64) -> DenseMatrix {
    assert!((0.0..=1.0).contains(&fraction), "mask fraction must lie in [0, 1]");
    assert!(block_len >= 1, "block length must be positive");
    let target = ((fraction * m as f64).ceil() as usize).min(m);
    let block_len = block_len.min(m.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = DenseMatrix::from_fn(m, n, |_, _| 1.0);
    let mut col = vec![true; m];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = true);
        let mut zeros = 0;
        if target == m {
            col.iter_mut().for_each(|c| *c = false);
            zeros = m;
        }
        while zeros < target {
            let len = block_len.min(target - zeros);
            let start = rng.random_range(0..=m - len);
            for c in &mut col[start..start + len] {
                if *c {
                    *c = false;
                    zeros += 1;
                }
            }
        }
        for (i, &keep) in col.iter().enumerate() {
            if !keep {
                mask.set(i, j, 0.0);
            }
        }
    }
    mask
}

/// Each entry is missing independently with probability `fraction`.
pub fn make_bernoulli_mask(m: usize, n: usize, fraction: f64, seed: u64) -> DenseMatrix {
    assert!((0.0..=1.0).contains(&fraction), "mask fraction must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = DenseMatrix::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            if !rng.random_bool(fraction) {
                mask.set(i, j, 1.0);
            }
        }
    }
    mask
}

/// Default block length: one contiguous quarter of the column.
pub fn default_block_len(m: usize) -> usize {
    m.div_ceil(4).max(1)
}

/// Shape of a low-rank synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise, relative to the RMS
    /// of the noise-free data. Zero gives an exactly low-rank matrix.
    pub noise: f64,
}

impl SyntheticSpec {
    /// Parses `<m>x<n>x<rank>`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match nums.as_deref() {
            Some(&[m, n, rank]) if m > 0 && n > 0 && rank > 0 => Ok(Self {
                m,
                n,
                rank,
                seed,
                noise: 0.0,
            }),
            _ => Err(Error::Contract(format!(
                "synthetic spec {s:?} must look like <m>x<n>x<rank> with positive entries"
            ))),
        }
    }

    /// Image shape used when writing restored columns: square when `m` is a
    /// perfect square, otherwise a single row.
    pub fn image_shape(&self) -> (usize, usize) {
        square_shape(self.m).unwrap_or((1, self.m))
    }
}

pub fn square_shape(m: usize) -> Option<(usize, usize)> {
    let side = (m as f64).sqrt().round() as usize;
    (side * side == m).then_some((side, side))
}

/// Smooth nonnegative "images" of rank `spec.rank`: each atom is a random
/// low-frequency cosine field shifted to be nonnegative, coefficients are
/// uniform on `[0, 1)`. Returns `(Y, C*, X*)`; `Y` carries the optional
/// additive noise, so it is only exactly `C* X*` when `spec.noise == 0`.
pub fn synthetic_low_rank(spec: &SyntheticSpec) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = spec.image_shape();
    let mut atoms = DenseMatrix::zeros(spec.m, spec.rank);
    const FREQS: usize = 3;
    for k in 0..spec.rank {
        let weights: Vec<f64> = (0..FREQS * FREQS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phases: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..std::f64::consts::PI)).collect();
        let mut field = vec![0.0; spec.m];
        for (p, f) in field.iter_mut().enumerate() {
            // column-major pixel index, matching the vectorisation
            let (row, col) = (p % h, p / h);
            let u = (row as f64 + 0.5) / h as f64;
            let v = (col as f64 + 0.5) / w as f64;
            let mut acc = 0.0;
            for a in 0..FREQS {
                for b in 0..FREQS {
                    acc += weights[a * FREQS + b]
                        * (std::f64::consts::PI * a as f64 * u + phases[0]).cos()
                        * (std::f64::consts::PI * b as f64 * v + phases[1]).cos();
                }
            }
            *f = acc;
        }
        let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, f) in field.iter().enumerate() {
            atoms.set(i, k, f - lo);
        }
    }
    let coeffs = DenseMatrix::from_fn(spec.rank, spec.n, |_, _| rng.random_range(0.0..1.0));
    let mut y = atoms.matmul(&coeffs).expect("conformable by construction");
    if spec.noise > 0.0 {
        let rms = y.frobenius_norm() / (y.len().max(1) as f64).sqrt();
        let sd = spec.noise * rms;
        y = DenseMatrix::from_fn(y.rows(), y.cols(), |i, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            y.get(i, j) + sd * z
        });
    }
    (y, atoms, coeffs)
}
