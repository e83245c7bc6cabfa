//! Synthetic generators, CSV ingestion, stream batching and k-fold splits.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::gmm::Gmm;

/// Feature matrix with optional class labels, tagged with a domain name.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: Array2<f64>,
    y: Option<Vec<usize>>,
    domain: String,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Option<Vec<usize>>, domain: impl Into<String>) -> Result<Self> {
        if let Some(y) = &y {
            if y.len() != x.nrows() {
                return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
            }
        }
        if let Some((i, _)) = x.rows().into_iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("row {i} contains a non-finite value")));
        }
        Ok(Self { x, y, domain: domain.into() })
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> Option<&[usize]> {
        self.y.as_deref()
    }

    /// Labels, or a data error naming the domain when there are none.
    pub fn labels(&self) -> Result<&[usize]> {
        self.y().ok_or_else(|| Error::Data(format!("dataset `{}` has no labels", self.domain)))
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// `max label + 1`, or 0 when unlabeled.
    pub fn n_classes(&self) -> usize {
        self.y.as_ref().and_then(|y| y.iter().max()).map_or(0, |m| m + 1)
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            domain: self.domain.clone(),
        }
    }

    pub fn into_parts(self) -> (Array2<f64>, Option<Vec<usize>>) {
        (self.x, self.y)
    }
}

/// Emission order of the toy clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Order {
    /// Cluster 0 in full, then cluster 1, then cluster 2.
    #[default]
    Sequential,
    Shuffled,
}

pub const TOY_PER_CLUSTER: usize = 200;
const TOY_RADIUS: f64 = 1.0;
const TOY_NOISE: f64 = 0.1;
/// (center x, center y, upper arc?) for the three interleaved crescents.
const TOY_ARCS: [(f64, f64, bool); 3] = [(0.0, 0.0, true), (1.0, 0.5, false), (2.0, 0.0, true)];

/// Three interleaved noisy half-circle arcs in 2-d, 200 points each,
/// labeled by arc.
pub fn gen_toy_clusters(seed: u64, order: Order) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE).expect("valid");
    let n = TOY_PER_CLUSTER * TOY_ARCS.len();
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for (c, &(cx, cy, upper)) in TOY_ARCS.iter().enumerate() {
        for i in 0..TOY_PER_CLUSTER {
            let t = rng.random_range(0.0..PI);
            let s = if upper { 1.0 } else { -1.0 };
            let row = c * TOY_PER_CLUSTER + i;
            x[[row, 0]] = cx + TOY_RADIUS * t.cos() + noise.sample(&mut rng);
            x[[row, 1]] = cy + s * TOY_RADIUS * t.sin() + noise.sample(&mut rng);
            y.push(c);
        }
    }
    let ds = LabeledDataset { x, y: Some(y), domain: "toy".into() };
    match order {
        Order::Sequential => ds,
        Order::Shuffled => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            ds.select(&idx)
        }
    }
}

/// Settings of the synthetic multi-source benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsdaSpec {
    pub n_sources: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub shift_scale: f64,
    /// Standard deviation of the shared class centers, in units of the
    /// within-class standard deviation.
    pub class_spread: f64,
    /// Standard deviation of a per-class offset added to the target means, so
    /// the target is not an exact interpolation of the sources.
    pub target_offset: f64,
    pub n_per_domain: usize,
    pub seed: u64,
}

/// Sources and target of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdaData {
    pub sources: Vec<LabeledDataset>,
    pub target: LabeledDataset,
}

/// Axis-aligned class-conditional Gaussians. Shared class centers are drawn
/// from `N(0, class_spread^2)` with within-class std in `[0.75, 1.25)`. Source
/// `s` moves every center through its own affine map `m -> A m + b`, with
/// `A = I + (shift_scale / 4) G / sqrt(d)` and `G`, `b / shift_scale` standard
/// normal, and rescales the stds per dimension by `exp(0.05 shift_scale z)`.
/// The target's class parameters are a random convex combination
/// (Dirichlet(1) weights) of the sources' plus a `N(0, target_offset^2)`
/// offset on the means. Every domain has `n_per_domain` samples with balanced
/// classes, emitted in shuffled order.
pub fn gen_msda_synthetic(spec: &MsdaSpec) -> Result<MsdaData> {
    let MsdaSpec { n_sources, n_classes, dim, shift_scale, class_spread, target_offset, n_per_domain, seed } = *spec;
    if n_sources < 1 || n_classes < 2 || dim < 1 {
        return Err(Error::invalid("need at least one source, two classes and one dimension"));
    }
    let scales = [shift_scale, class_spread, target_offset];
    if scales.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("shift scale, class spread and target offset must be finite and nonnegative"));
    }
    if n_per_domain % n_classes != 0 {
        return Err(Error::invalid(format!(
            "{n_per_domain} samples per domain cannot be split evenly over {n_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let centers: Vec<Vec<f64>> =
        (0..n_classes).map(|_| (0..dim).map(|_| class_spread * normal(&mut rng)).collect()).collect();
    let spreads: Vec<Vec<f64>> =
        (0..n_classes).map(|_| (0..dim).map(|_| rng.random_range(0.75..1.25)).collect()).collect();

    // (means, stds) per class
    type Params = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let mix_scale = 0.25 * shift_scale / (dim as f64).sqrt();
    let source_params: Vec<Params> = (0..n_sources)
        .map(|_| {
            let a = Array2::from_shape_fn((dim, dim), |(i, j)| f64::from(u8::from(i == j)) + mix_scale * normal(&mut rng));
            let b: Vec<f64> = (0..dim).map(|_| shift_scale * normal(&mut rng)).collect();
            let scale: Vec<f64> = (0..dim).map(|_| (0.05 * shift_scale * normal(&mut rng)).exp()).collect();
            let means = centers
                .iter()
                .map(|m| (0..dim).map(|t| b[t] + (0..dim).map(|u| a[[t, u]] * m[u]).sum::<f64>()).collect())
                .collect();
            let stds = spreads.iter().map(|s| s.iter().zip(&scale).map(|(x, r)| x * r).collect()).collect();
            (means, stds)
        })
        .collect();
    let gamma = Gamma::new(1.0, 1.0).expect("valid");
    let raw: Vec<f64> = (0..n_sources).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let mut target_params: Params = (vec![vec![0.0; dim]; n_classes], vec![vec![0.0; dim]; n_classes]);
    for ((means, stds), w) in source_params.iter().zip(&raw) {
        let w = w / total;
        for c in 0..n_classes {
            for t in 0..dim {
                target_params.0[c][t] += w * means[c][t];
                target_params.1[c][t] += w * stds[c][t];
            }
        }
    }
    for m in target_params.0.iter_mut() {
        m.iter_mut().for_each(|v| *v += target_offset * normal(&mut rng));
    }

    let per_class = n_per_domain / n_classes;
    let domain = |name: String, (means, stds): &Params, rng: &mut ChaCha8Rng| {
        let mut y: Vec<usize> = (0..n_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        y.shuffle(rng);
        let mut x = Array2::zeros((n_per_domain, dim));
        for (i, &c) in y.iter().enumerate() {
            for t in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                x[[i, t]] = means[c][t] + stds[c][t] * z;
            }
        }
        LabeledDataset { x, y: Some(y), domain: name }
    };
    let sources = source_params.iter().enumerate().map(|(s, p)| domain(format!("source{s}"), p, &mut rng)).collect();
    let target = domain("target".into(), &target_params, &mut rng);
    Ok(MsdaData { sources, target })
}

/// Which CSV column holds the labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label: Option<LabelColumn>,
}

/// Reads a comma-separated numeric file. Row numbers in errors are 1-based
/// file lines.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<LabeledDataset> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(opts.has_header).from_reader(file);
    let offset = if opts.has_header { 2 } else { 1 };

    let label_idx = match &opts.label {
        None => None,
        Some(LabelColumn::Index(i)) => Some(*i),
        Some(LabelColumn::Name(name)) => {
            if !opts.has_header {
                return Err(Error::Data(format!("label column `{name}` requested by name but the file has no header")));
            }
            let headers = reader.headers()?;
            Some(
                headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| Error::Data(format!("label column `{name}` not found in header")))?,
            )
        }
    };

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let line = r + offset;
        let record = record.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
        if let Some(l) = label_idx {
            if l >= record.len() {
                return Err(Error::Data(format!("row {line}: label column {l} missing ({} columns)", record.len())));
            }
        }
        let n_features = record.len() - usize::from(label_idx.is_some());
        match width {
            None => width = Some(n_features),
            Some(w) if w != n_features => {
                return Err(Error::Data(format!("row {line}: expected {w} features, found {n_features}")));
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(c) == label_idx {
                let label = cell
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("row {line}: label `{cell}` is not a class index")))?;
                labels.push(label);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("row {line}, column {}: `{cell}` is not a number", c + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {line}, column {}: non-finite value `{cell}`", c + 1)));
            }
            values.push(v);
        }
    }
    let d = width.ok_or(Error::Empty("csv file"))?;
    if d == 0 {
        return Err(Error::Data("no feature columns".into()));
    }
    let n = values.len() / d;
    let x = Array2::from_shape_vec((n, d), values).expect("rows checked for width");
    let domain = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(x, label_idx.map(|_| labels), domain)
}

/// Writes features (shortest round-trip decimal form) and, when present,
/// a trailing `label` column.
pub fn save_csv(path: &Path, ds: &LabeledDataset, header: bool) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    if header {
        let mut names: Vec<String> = (0..ds.dim()).map(|t| format!("x{t}")).collect();
        if ds.y.is_some() {
            names.push("label".into());
        }
        writeln!(out, "{}", names.join(","))?;
    }
    for (i, row) in ds.x.rows().into_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(y) = &ds.y {
            cells.push(y[i].to_string());
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Index partition for one fold; both lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` folds over `n` samples. With labels, each class is shuffled and dealt
/// round-robin, continuing the deal across classes so fold sizes differ by
/// at most one.
pub fn kfold_split(n: usize, labels: Option<&[usize]>, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::invalid(format!("{k} folds requested for {n} samples")));
    }
    if let Some(y) = labels {
        if y.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y.len() });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match labels {
        None => vec![(0..n).collect()],
        Some(y) => {
            let n_classes = y.iter().max().map_or(0, |m| m + 1);
            (0..n_classes).map(|c| (0..n).filter(|&i| y[i] == c).collect()).collect()
        }
    };
    let mut tests = vec![Vec::new(); k];
    let mut next = 0;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            tests[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let mut in_test = vec![false; n];
            test.iter().for_each(|&i| in_test[i] = true);
            let train = (0..n).filter(|&i| !in_test[i]).collect();
            Fold { train, test }
        })
        .collect())
}

/// Consecutive row batches of at most `n_b` rows.
pub fn as_stream(x: ArrayView2<'_, f64>, n_b: usize) -> Result<impl Iterator<Item = ArrayView2<'_, f64>>> {
    if n_b == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let n = x.nrows();
    Ok((0..n).step_by(n_b).map(move |s| x.slice_axis_move(Axis(0), (s..(s + n_b).min(n)).into())))
}

/// A stream of `n_total` samples from `gmm`, drawn lazily one batch at a
/// time; batch `i` uses seed `seed + i`.
#[derive(Debug, Clone)]
pub struct GmmStream {
    gmm: Gmm,
    remaining: usize,
    batch: usize,
    index: u64,
    seed: u64,
}

impl GmmStream {
    pub fn new(gmm: Gmm, n_total: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(Self { gmm, remaining: n_total, batch, index: 0, seed })
    }
}

impl Iterator for GmmStream {
    type Item = Array2<f64>;

    fn next(&mut self) -> Option<Array2<f64>> {
        if self.remaining == 0 {
            return None;
        }
        let n = self.batch.min(self.remaining);
        self.remaining -= n;
        let out = self.gmm.sample(n, self.seed.wrapping_add(self.index));
        self.index += 1;
        Some(out)
    }
}
