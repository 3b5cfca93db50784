//! Datasets: IDX and CSV ingestion, synthetic benchmarks, seeded splitting
//! and mini-batching.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{rng_for, stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Classes(Vec<usize>),
    /// `[n, width]` real-valued targets.
    Values(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Values(t) => Labels::Values(t.gather_rows(indices)),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Classes(c) => Some(c),
            Labels::Values(_) => None,
        }
    }

    /// Regression target for output `j` of sample `i` when the network has
    /// `width` outputs. Class labels become one-hot vectors, or the class id
    /// itself for a single output.
    pub fn target_value(&self, i: usize, j: usize, width: usize) -> Result<f64> {
        match self {
            Labels::Classes(c) if width == 1 => Ok(c[i] as f64),
            Labels::Classes(c) => Ok(if c[i] == j { 1.0 } else { 0.0 }),
            Labels::Values(t) => {
                if t.row_len() != width {
                    return Err(Error::shape(format!("targets have width {}, outputs {width}", t.row_len())));
                }
                Ok(t.row(i)[j])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// `[n, ...sample shape]`.
    pub inputs: Tensor,
    pub labels: Labels,
    /// Number of classes (0 for real-valued targets).
    pub class_count: usize,
    /// Original label text per class id, when known.
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Tensor, labels: Labels, class_count: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::shape("dataset inputs need a leading sample dimension"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Labels::Classes(c) = &labels {
            if let Some(bad) = c.iter().find(|&&y| y >= class_count) {
                return Err(Error::Data(format!("class id {bad} outside [0, {class_count})")));
            }
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            class_count,
            class_names: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.gather_rows(indices),
            labels: self.labels.subset(indices),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }

    /// Inputs and labels of one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Labels) {
        (self.inputs.gather_rows(indices), self.labels.subset(indices))
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        if let Labels::Classes(c) = &self.labels {
            for &y in c {
                h[y] += 1;
            }
        }
        h
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(path.display().to_string()))
}

/// Loads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to `[0, 1]` and images shaped `[n, 1, rows, cols]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_with(images_path, labels_path, false)
}

/// As [`load_idx`]; `transpose` swaps rows and columns of every image
/// (the raw EMNIST distribution stores images transposed).
pub fn load_idx_with(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, transpose: bool) -> Result<Dataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let img = read_maybe_gz(ip)?;
    let lab = read_maybe_gz(lp)?;

    let magic = be_u32(&img, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: ip.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(&lab, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: lp.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let n_labels = be_u32(&lab, 4, lp)? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = img
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Truncated(ip.display().to_string()))?;
    let label_bytes = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::Truncated(lp.display().to_string()))?;

    let mut data = Vec::with_capacity(pixels.len());
    let (out_rows, out_cols) = if transpose { (cols, rows) } else { (rows, cols) };
    for s in 0..n {
        let im = &pixels[s * rows * cols..(s + 1) * rows * cols];
        for r in 0..out_rows {
            for c in 0..out_cols {
                let v = if transpose { im[c * cols + r] } else { im[r * cols + c] };
                data.push(v as f64 / 255.0);
            }
        }
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let name = ip
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        name,
        Tensor::new(vec![n, 1, out_rows, out_cols], data)?,
        Labels::Classes(labels),
        class_count,
    )
}

/// Loads a headered CSV. `features` selects columns by name (all columns
/// except the label when `None`). Labels map to dense class ids in order of
/// first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, features: Option<&[String]>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_idx = find(label_column)?;
    let feature_idx: Vec<usize> = match features {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_idx).collect(),
    };

    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Data(format!("{} row {row}: {e}", path.display())))?;
        for &c in &feature_idx {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                row,
                column: headers[c].to_string(),
                value: cell.to_string(),
            })?;
            data.push(v);
        }
        let name = rec.get(label_idx).unwrap_or("").to_string();
        let next = ids.len();
        let id = *ids.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            next
        });
        labels.push(id);
    }
    let n = labels.len();
    let mut ds = Dataset::new(
        path.file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        Tensor::new(vec![n, feature_idx.len()], data)?,
        Labels::Classes(labels),
        names.len(),
    )?;
    ds.class_names = names;
    Ok(ds)
}

/// Writes a flat-feature class dataset as CSV (`f0..fK,label`). Values use
/// shortest round-trip formatting, so [`load_csv`] reproduces them exactly.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let classes = ds
        .labels
        .classes()
        .ok_or_else(|| Error::Data("save_csv needs class labels".into()))?;
    let width = ds.inputs.row_len();
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Data(e.to_string()))?;
    let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for (i, &y) in classes.iter().enumerate() {
        let mut rec: Vec<String> = ds.inputs.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.class_names.get(y).cloned().unwrap_or_else(|| y.to_string()));
        w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Two interleaved 2-D spirals (1.5 turns each), class 1 being class 0
/// rotated by half a turn. Radius grows from 0.1 to 1.
pub fn gen_two_spirals(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    gen_two_spirals_rotated(n_per_class, noise, seed, 0.0)
}

/// As [`gen_two_spirals`] with every point rotated by `angle` radians about the origin.
pub fn gen_two_spirals_rotated(n_per_class: usize, noise: f64, seed: u64, angle: f64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::precondition("two spirals needs n_per_class >= 1"));
    }
    if !(noise >= 0.0) {
        return Err(Error::precondition("noise must be >= 0"));
    }
    let mut rng = rng_for(seed, &[stream::INIT]);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        let t = i as f64 / n_per_class as f64;
        let theta = 3.0 * PI * t;
        let r = 0.1 + 0.9 * t;
        for class in 0..2 {
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let (mut x, mut y) = (sign * r * theta.cos(), sign * r * theta.sin());
            if noise > 0.0 {
                x += normal.sample(&mut rng);
                y += normal.sample(&mut rng);
            }
            data.push(ca * x - sa * y);
            data.push(sa * x + ca * y);
            labels.push(class);
        }
    }
    Dataset::new(
        "two_spirals",
        Tensor::new(vec![2 * n_per_class, 2], data)?,
        Labels::Classes(labels),
        2,
    )
}

/// XOR of the coordinate signs: points uniform in `[-1, 1]^2` with
/// `|x|, |y| >= margin`; class 1 when exactly one coordinate is negative.
pub fn gen_xor_quadrants(n: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !(0.0..1.0).contains(&margin) {
        return Err(Error::precondition("xor quadrants needs n >= 1 and margin in [0, 1)"));
    }
    let mut rng = rng_for(seed, &[stream::INIT]);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Balanced: cycle through the four quadrants.
        let (sx, sy) = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)][i % 4];
        let x = sx * rng.gen_range(margin..=1.0);
        let y = sy * rng.gen_range(margin..=1.0);
        data.push(x);
        data.push(y);
        labels.push(usize::from((x < 0.0) != (y < 0.0)));
    }
    Dataset::new("xor_quadrants", Tensor::new(vec![n, 2], data)?, Labels::Classes(labels), 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::precondition(format!("{name} fraction {f} not in (0, 1)")));
            }
        }
        self.check_total()
    }

    /// Validation for data that ships its own test set: `test` may be 0.
    pub fn validate_train_val(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::precondition(format!("{name} fraction {f} not in (0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.test) {
            return Err(Error::precondition(format!("test fraction {} not in [0, 1)", self.test)));
        }
        self.check_total()
    }

    fn check_total(&self) -> Result<()> {
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::precondition(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let tr = ((self.train * n as f64).round() as usize).min(n);
        let va = ((self.val * n as f64).round() as usize).min(n - tr);
        (tr, va, n - tr - va)
    }
}

/// Index partition produced by [`split_indices`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation followed by a contiguous partition (per class when
/// stratified).
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    partition(ds, spec, true)
}

/// Train/validation partition for data that comes with its own test set.
/// The test fraction is ignored and the rest rescaled.
pub fn split_train_val(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let idx = partition(ds, spec, false)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.val)))
}

fn partition(ds: &Dataset, spec: &SplitSpec, with_test: bool) -> Result<SplitIndices> {
    if with_test {
        spec.validate()?;
    } else {
        spec.validate_train_val()?;
    }
    let sizes = |n: usize| {
        if with_test {
            spec.sizes(n)
        } else {
            let tr = ((spec.train / (spec.train + spec.val) * n as f64).round() as usize).min(n);
            (tr, n - tr, 0)
        }
    };
    let mut rng = rng_for(spec.seed, &[stream::SPLIT]);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let groups: Vec<Vec<usize>> = match (&ds.labels, spec.stratified) {
        (Labels::Classes(c), true) => {
            let mut g = vec![Vec::new(); ds.class_count];
            for (i, &y) in c.iter().enumerate() {
                g[y].push(i);
            }
            g
        }
        _ => vec![(0..ds.len()).collect()],
    };
    for mut g in groups {
        g.shuffle(&mut rng);
        let (tr, va, _) = sizes(g.len());
        out.train.extend_from_slice(&g[..tr]);
        out.val.extend_from_slice(&g[tr..tr + va]);
        out.test.extend_from_slice(&g[tr + va..]);
    }
    if spec.stratified {
        out.train.shuffle(&mut rng);
        out.val.shuffle(&mut rng);
        out.test.shuffle(&mut rng);
    }
    for (name, part) in [("train", &out.train), ("val", &out.val), ("test", &out.test)] {
        if part.is_empty() && (with_test || name != "test") {
            return Err(Error::Data(format!("{name} split received 0 samples")));
        }
    }
    Ok(out)
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(ds, spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.val), ds.subset(&idx.test)))
}

/// Index batches covering `0..n` once. With a shuffle seed, the order is a
/// permutation determined by `(seed, epoch)`; the final short batch is kept.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::precondition("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch]));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
