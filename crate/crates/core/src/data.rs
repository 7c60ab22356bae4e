//! Domain-shift datasets: synthetic generators, CSV I/O and task splits.
//!
//! Ground-truth labels of unlabeled target samples live in [`SealedLabels`],
//! which only the evaluation module can open. Training code sees a
//! [`TrainingView`], which carries no such labels at all.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::EvalToken;
use crate::ndmath::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    /// `None` for unlabeled samples.
    pub y: Option<usize>,
    pub domain: Domain,
}

/// Evaluation labels of the unlabeled target samples, index-aligned with
/// [`DomainDataset::target_unlabeled`]. `None` marks an unknown truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedLabels(Vec<Option<usize>>);

impl SealedLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reveal(&self, _token: &EvalToken) -> &[Option<usize>] {
        &self.0
    }

    #[cfg(test)]
    pub(crate) fn for_tests(labels: Vec<Option<usize>>) -> Self {
        SealedLabels(labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    source: Vec<Sample>,
    target_labeled: Vec<Sample>,
    target_unlabeled: Vec<Sample>,
    hidden: SealedLabels,
    class_count: usize,
    dim: usize,
}

/// Label-free inputs and the labels training is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub target_labeled_x: Matrix,
    pub target_labeled_y: Vec<usize>,
    pub target_unlabeled_x: Matrix,
    pub class_count: usize,
    pub dim: usize,
}

impl DomainDataset {
    /// `target` pairs each unlabeled target input with its evaluation label,
    /// which is sealed away.
    pub fn new(
        source: Vec<Sample>,
        target_labeled: Vec<Sample>,
        target: Vec<(Vec<f64>, Option<usize>)>,
        class_count: usize,
        dim: usize,
    ) -> Result<Self> {
        let (xs, hidden): (Vec<_>, Vec<_>) = target.into_iter().unzip();
        let target_unlabeled = xs.into_iter().map(|x| Sample { x, y: None, domain: Domain::Target }).collect();
        let ds =
            DomainDataset { source, target_labeled, target_unlabeled, hidden: SealedLabels(hidden), class_count, dim };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument("class count and dimension must be positive".into()));
        }
        let check = |s: &Sample, want_label: bool, domain: Domain| -> Result<()> {
            if s.x.len() != self.dim {
                return Err(Error::Shape(format!("sample has {} features, expected {}", s.x.len(), self.dim)));
            }
            if s.domain != domain {
                return Err(Error::InvalidArgument(format!("{} sample in the wrong split", s.domain.as_str())));
            }
            match s.y {
                Some(y) if y >= self.class_count => {
                    Err(Error::InvalidArgument(format!("label {y} out of range for {} classes", self.class_count)))
                }
                None if want_label => Err(Error::InvalidArgument("labeled split contains an unlabeled sample".into())),
                Some(_) if !want_label => Err(Error::InvalidArgument("unlabeled split contains a label".into())),
                _ => Ok(()),
            }
        };
        self.source.iter().try_for_each(|s| check(s, true, Domain::Source))?;
        self.target_labeled.iter().try_for_each(|s| check(s, true, Domain::Target))?;
        self.target_unlabeled.iter().try_for_each(|s| check(s, false, Domain::Target))?;
        if self.hidden.0.iter().flatten().any(|&y| y >= self.class_count) {
            return Err(Error::InvalidArgument("evaluation label out of range".into()));
        }
        Ok(())
    }

    pub fn source(&self) -> &[Sample] {
        &self.source
    }

    pub fn target_labeled(&self) -> &[Sample] {
        &self.target_labeled
    }

    pub fn target_unlabeled(&self) -> &[Sample] {
        &self.target_unlabeled
    }

    pub fn hidden_labels(&self) -> &SealedLabels {
        &self.hidden
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Shuffles the sealed evaluation labels (leakage audits).
    pub fn permute_hidden_labels(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.hidden.0.shuffle(&mut rng);
    }

    pub fn training_view(&self) -> TrainingView {
        let inputs = |s: &[Sample]| {
            let mut data = Vec::with_capacity(s.len() * self.dim);
            s.iter().for_each(|smp| data.extend_from_slice(&smp.x));
            Matrix::from_vec(s.len(), self.dim, data).expect("validated widths")
        };
        let labels = |s: &[Sample]| s.iter().map(|smp| smp.y.expect("labeled split")).collect();
        TrainingView {
            source_x: inputs(&self.source),
            source_y: labels(&self.source),
            target_labeled_x: inputs(&self.target_labeled),
            target_labeled_y: labels(&self.target_labeled),
            target_unlabeled_x: inputs(&self.target_unlabeled),
            class_count: self.class_count,
            dim: self.dim,
        }
    }

    /// Unlabeled target samples, each with its sealed truth, in order.
    fn take_target_pool(&mut self) -> Vec<(Sample, Option<usize>)> {
        let pool: Vec<_> =
            std::mem::take(&mut self.target_unlabeled).into_iter().zip(std::mem::take(&mut self.hidden.0)).collect();
        pool
    }

    fn set_target_pool(&mut self, pool: Vec<(Sample, Option<usize>)>) {
        let (s, h): (Vec<_>, Vec<_>) = pool.into_iter().unzip();
        self.target_unlabeled = s;
        self.hidden = SealedLabels(h);
    }
}

/// Rotates 2-D points about the origin.
fn rotate(p: [f64; 2], deg: f64) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn moons(n: usize, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<([f64; 2], usize)> {
    let n_outer = n - n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n_outer);
        let t = rng.random_range(0.0..std::f64::consts::PI);
        // centered so the pair's bounding box midpoint is the origin
        let (x, y) = if class == 0 { (t.cos() - 0.5, t.sin() - 0.25) } else { (0.5 - t.cos(), 0.25 - t.sin()) };
        out.push(([x + noise.sample(rng), y + noise.sample(rng)], class));
    }
    out.shuffle(rng);
    out
}

/// Two interleaved half-circles as source; the target is an independent
/// draw from the same distribution rotated by `rotation_deg` about the origin.
pub fn gen_two_moons_shift(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if n_per_domain < 2 {
        return Err(Error::InvalidArgument("two-moons needs at least 2 samples per domain".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = moons(n_per_domain, &noise, &mut rng)
        .into_iter()
        .map(|(p, y)| Sample { x: p.to_vec(), y: Some(y), domain: Domain::Source })
        .collect();
    let target = moons(n_per_domain, &noise, &mut rng)
        .into_iter()
        .map(|(p, y)| (rotate(p, rotation_deg).to_vec(), Some(y)))
        .collect();
    DomainDataset::new(source, Vec::new(), target, 2, 2)
}

/// Class means on a circle in the first two coordinates, radius chosen so
/// neighboring means are exactly 4 apart.
fn blob_means(k: usize, d: usize) -> Vec<Vec<f64>> {
    let r = 2.0 / (std::f64::consts::PI / k as f64).sin();
    (0..k)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            let mut m = vec![0.0; d];
            m[0] = r * a.cos();
            m[1] = r * a.sin();
            m
        })
        .collect()
}

/// K unit-variance isotropic Gaussians as source; the target translates
/// every mean by `shift`.
pub fn gen_gaussian_blobs_shift(
    class_count: usize,
    dim: usize,
    n_per_class: usize,
    shift: &[f64],
    seed: u64,
) -> Result<DomainDataset> {
    if class_count < 2 || dim < 2 {
        return Err(Error::InvalidArgument("blobs need K >= 2 and d >= 2".into()));
    }
    if shift.len() != dim {
        return Err(Error::Shape(format!("shift has {} entries, expected {dim}", shift.len())));
    }
    let means = blob_means(class_count, dim);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |offset: &[f64], rng: &mut ChaCha8Rng| {
        let mut pts: Vec<(Vec<f64>, usize)> = Vec::with_capacity(class_count * n_per_class);
        for (j, mean) in means.iter().enumerate() {
            for _ in 0..n_per_class {
                let x = mean.iter().zip(offset).map(|(m, o)| m + o + unit.sample(rng)).collect();
                pts.push((x, j));
            }
        }
        pts.shuffle(rng);
        pts
    };
    let zero = vec![0.0; dim];
    let source =
        draw(&zero, &mut rng).into_iter().map(|(x, y)| Sample { x, y: Some(y), domain: Domain::Source }).collect();
    let target = draw(shift, &mut rng).into_iter().map(|(x, y)| (x, Some(y))).collect();
    DomainDataset::new(source, Vec::new(), target, class_count, dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Uda,
    Ssda,
    Pda,
    Ssl,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Uda => "uda",
            Task::Ssda => "ssda",
            Task::Pda => "pda",
            Task::Ssl => "ssl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub task: Task,
    /// Labeled target samples per class (SSDA, SSL).
    pub shots_per_class: usize,
    /// Target keeps classes `0..target_class_count` (PDA).
    pub target_class_count: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { task: Task::Uda, shots_per_class: 3, target_class_count: 1, seed: 0 }
    }
}

/// Reorganizes an unsplit dataset for the requested task.
pub fn apply_split(ds: &DomainDataset, spec: &SplitSpec) -> Result<DomainDataset> {
    let mut out = ds.clone();
    // fold any previous labeled target samples back into the pool
    let mut pool = out.take_target_pool();
    for s in std::mem::take(&mut out.target_labeled) {
        let y = s.y;
        pool.push((Sample { y: None, ..s }, y));
    }
    match spec.task {
        Task::Uda => out.set_target_pool(pool),
        Task::Pda => {
            if spec.target_class_count == 0 || spec.target_class_count > ds.class_count {
                return Err(Error::InvalidArgument(format!(
                    "target class count {} outside 1..={}",
                    spec.target_class_count, ds.class_count
                )));
            }
            if pool.iter().any(|(_, y)| y.is_none()) {
                return Err(Error::InsufficientSamples("partial-set split needs every target label".into()));
            }
            pool.retain(|(_, y)| y.is_some_and(|y| y < spec.target_class_count));
            out.set_target_pool(pool);
        }
        Task::Ssda | Task::Ssl => {
            if spec.shots_per_class == 0 {
                return Err(Error::InvalidArgument("shots per class must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut chosen = vec![false; pool.len()];
            for class in 0..ds.class_count {
                let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].1 == Some(class)).collect();
                if members.len() < spec.shots_per_class {
                    return Err(Error::InsufficientSamples(format!(
                        "class {class} has {} target samples, {} requested",
                        members.len(),
                        spec.shots_per_class
                    )));
                }
                members.shuffle(&mut rng);
                members[..spec.shots_per_class].iter().for_each(|&i| chosen[i] = true);
            }
            let mut rest = Vec::with_capacity(pool.len());
            for ((s, y), pick) in pool.into_iter().zip(chosen) {
                if pick {
                    out.target_labeled.push(Sample { y, ..s });
                } else {
                    rest.push((s, y));
                }
            }
            out.set_target_pool(rest);
            if spec.task == Task::Ssl {
                out.source.clear();
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Writes `domain,label,f0,...`; target rows carry their sealed evaluation
/// label (or -1). Only unsplit datasets can be written.
pub fn save_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, to_csv(ds)?.as_bytes())
}

pub fn to_csv(ds: &DomainDataset) -> Result<String> {
    if !ds.target_labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "labeled target samples cannot be told apart in CSV; save before splitting".into(),
        ));
    }
    let mut out = String::from("domain,label");
    for f in 0..ds.dim {
        write!(out, ",f{f}").unwrap();
    }
    out.push('\n');
    let mut row = |domain: Domain, y: Option<usize>, x: &[f64]| {
        out.push_str(domain.as_str());
        match y {
            Some(y) => write!(out, ",{y}").unwrap(),
            None => out.push_str(",-1"),
        }
        for v in x {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    };
    for s in &ds.source {
        row(Domain::Source, s.y, &s.x);
    }
    for (s, y) in ds.target_unlabeled.iter().zip(&ds.hidden.0) {
        row(Domain::Target, *y, &s.x);
    }
    Ok(out)
}

pub fn load_csv(path: &Path) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<DomainDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "domain" || cols[1] != "label" {
        return Err(Error::Parse { line: 1, msg: "header must start with domain,label,f0".into() });
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse { line: 1, msg: format!("expected column f{i}, found {c:?}") });
        }
    }
    let dim = cols.len() - 2;
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut max_label: Option<usize> = None;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(err(format!("expected {} columns, found {}", cols.len(), fields.len())));
        }
        let domain = match fields[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(err(format!("unknown domain {other:?}"))),
        };
        let label: i64 = fields[1].parse().map_err(|_| err(format!("bad label {:?}", fields[1])))?;
        let y = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(err(format!("bad label {l}"))),
        };
        let x = fields[2..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("bad feature value {f:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(y) = y {
            max_label = Some(max_label.map_or(y, |m| m.max(y)));
        }
        match domain {
            Domain::Source => {
                if y.is_none() {
                    return Err(err("source samples must be labeled".into()));
                }
                source.push(Sample { x, y, domain });
            }
            Domain::Target => target.push((x, y)),
        }
    }
    let class_count = max_label.map_or(0, |m| m + 1);
    if class_count == 0 {
        return Err(Error::Parse { line: 1, msg: "file contains no labels, cannot infer class count".into() });
    }
    DomainDataset::new(source, Vec::new(), target, class_count, dim)
}
