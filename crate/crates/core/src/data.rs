//! Synthetic generators, IHDP ingestion, splitting and standardization.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub const IHDP_COVARIATES: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub x: Tensor,
    pub treated: Vec<bool>,
    pub y: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Noise-free baseline `f(x)`.
    pub mu0: Vec<f64>,
    /// Noise-free effect `tau(x)`.
    pub tau: Vec<f64>,
    /// `P(A = 1 | x)`; only known for propensity-based selection.
    pub propensity: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IhdpDataset {
    pub x: Tensor,
    pub treated: Vec<bool>,
    pub y: Vec<f64>,
    pub y_cf: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
}

/// Noise-free response surfaces, plus the outcome noise scale when known.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// Standard deviation of the additive Gaussian outcome noise.
    pub noise_std: Option<f64>,
}

impl GroundTruth {
    pub fn tau(&self) -> Vec<f64> {
        self.mu1.iter().zip(&self.mu0).map(|(a, b)| a - b).collect()
    }

    pub fn mu(&self, treated: bool) -> &[f64] {
        if treated {
            &self.mu1
        } else {
            &self.mu0
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            mu0: idx.iter().map(|&i| self.mu0[i]).collect(),
            mu1: idx.iter().map(|&i| self.mu1[i]).collect(),
            noise_std: self.noise_std,
        }
    }
}

/// Observational data as seen by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalData {
    pub x: Tensor,
    pub treated: Vec<bool>,
    pub y: Vec<f64>,
    pub truth: Option<GroundTruth>,
}

impl CausalData {
    pub fn len(&self) -> usize {
        self.treated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treated.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> CausalData {
        CausalData {
            x: self.x.select_rows(idx),
            treated: idx.iter().map(|&i| self.treated[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            truth: self.truth.as_ref().map(|t| t.subset(idx)),
        }
    }

    pub fn treated_count(&self) -> usize {
        self.treated.iter().filter(|&&a| a).count()
    }
}

impl From<SyntheticDataset> for CausalData {
    fn from(d: SyntheticDataset) -> Self {
        let mu1 = d.mu0.iter().zip(&d.tau).map(|(f, t)| f + t).collect();
        CausalData { x: d.x, treated: d.treated, y: d.y, truth: Some(GroundTruth { mu0: d.mu0, mu1, noise_std: Some(1.0) }) }
    }
}

impl From<IhdpDataset> for CausalData {
    fn from(d: IhdpDataset) -> Self {
        CausalData { x: d.x, treated: d.treated, y: d.y, truth: Some(GroundTruth { mu0: d.mu0, mu1: d.mu1, noise_std: None }) }
    }
}

pub fn baseline(x: &[f64]) -> f64 {
    0.5 * x[0] * x[0] + 0.5 * ((x[1] + x[2]) / 4.0).exp() + (x[3] + x[4]).sin()
}

pub fn effect(x: &[f64]) -> f64 {
    1.0 + 0.5 * x[0] - 0.5 * x[1] * x[1] + x[2].sin()
}

pub fn propensity_logit(x: &[f64]) -> f64 {
    0.5 + 0.5 * x[0] - x[1] * x[1] + x[2].sin()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn check_dims(n: usize, d: usize) -> Result<()> {
    if d < 5 {
        return Err(Error::Precondition(format!("synthetic settings need d >= 5 covariates, got d = {d}")));
    }
    if n == 0 {
        return Err(Error::Precondition("synthetic settings need n >= 1".into()));
    }
    Ok(())
}

fn assemble(x: Vec<f64>, d: usize, treated: Vec<bool>, noise: Vec<(f64, f64)>, propensity: Option<Vec<f64>>) -> SyntheticDataset {
    let n = treated.len();
    let (mut y, mut y0, mut y1, mut mu0, mut tau) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let f = baseline(row);
        let t = effect(row);
        let (e0, e1) = noise[i];
        let (a0, a1) = (f + e0, f + t + e1);
        y.push(if treated[i] { a1 } else { a0 });
        y0.push(a0);
        y1.push(a1);
        mu0.push(f);
        tau.push(t);
    }
    SyntheticDataset { x: Tensor::from_parts(vec![n, d], x), treated, y, y0, y1, mu0, tau, propensity }
}

/// Propensity-based selection: `X ~ N(0, I)`, `A ~ Bernoulli(sigmoid(logit(X)))`.
pub fn gen_setting_a(n: usize, d: usize, seed: u64) -> Result<SyntheticDataset> {
    check_dims(n, d)?;
    let mut rng = CounterRng::new(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut treated = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut prop = Vec::with_capacity(n);
    for _ in 0..n {
        let row = rng.normals(d);
        let p = sigmoid(propensity_logit(&row));
        treated.push(rng.uniform() < p);
        noise.push((rng.normal(), rng.normal()));
        prop.push(p);
        x.extend(row);
    }
    Ok(assemble(x, d, treated, noise, Some(prop)))
}

/// Covariate shift: `A ~ Bernoulli(0.5)`, `X | A ~ N(s * A * 1, I)`.
pub fn gen_setting_b(n: usize, d: usize, shift: f64, seed: u64) -> Result<SyntheticDataset> {
    check_dims(n, d)?;
    let mut rng = CounterRng::new(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut treated = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.bernoulli(0.5);
        let offset = if a { shift } else { 0.0 };
        x.extend(rng.normals(d).into_iter().map(|v| v + offset));
        treated.push(a);
        noise.push((rng.normal(), rng.normal()));
    }
    Ok(assemble(x, d, treated, noise, None))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// CSV with header `a,y,y0,y1,tau,x1..xd`.
pub fn write_synthetic_csv(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    let d = ds.x.cols();
    let mut out = String::new();
    let mut header = vec!["a".to_string(), "y".into(), "y0".into(), "y1".into(), "tau".into()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.treated.len() {
        let mut fields =
            vec![if ds.treated[i] { "1".to_string() } else { "0".to_string() }, fmt_f64(ds.y[i]), fmt_f64(ds.y0[i]), fmt_f64(ds.y1[i]), fmt_f64(ds.tau[i])];
        fields.extend(ds.x.row(i).iter().map(|&v| fmt_f64(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn parse_cell(rec: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<f64> {
    let raw = rec.get(col).ok_or_else(|| Error::parse(format!("row {row}, column {name}"), "missing value"))?;
    let v: f64 = raw.parse().map_err(|_| Error::parse(format!("row {row}, column {name}"), format!("not a number: {raw:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(format!("row {row}, column {name}"), "non-finite value"));
    }
    Ok(v)
}

fn parse_treatment(rec: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<bool> {
    let v = parse_cell(rec, row, col, name)?;
    match v {
        v if v == 0.0 => Ok(false),
        v if v == 1.0 => Ok(true),
        other => Err(Error::parse(format!("row {row}, column {name}"), format!("treatment must be 0 or 1, got {other}"))),
    }
}

fn check_header(headers: &csv::StringRecord, expected: &[String], path: &Path) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got.len() != expected.len() {
        return Err(Error::parse(
            format!("{} header", path.display()),
            format!("expected {} columns ({}), found {}", expected.len(), expected.join(","), got.len()),
        ));
    }
    for (k, (g, e)) in got.iter().zip(expected).enumerate() {
        if g != e {
            return Err(Error::parse(format!("{} header, column {}", path.display(), k + 1), format!("expected {e:?}, found {g:?}")));
        }
    }
    Ok(())
}

/// Reads a file written by [`write_synthetic_csv`]. `f(x)` is recomputed
/// from the covariates; propensities are not stored.
pub fn read_synthetic_csv(path: &Path) -> Result<SyntheticDataset> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?.clone();
    let d = headers.len().saturating_sub(5);
    let mut expected = vec!["a".to_string(), "y".into(), "y0".into(), "y1".into(), "tau".into()];
    expected.extend((1..=d).map(|k| format!("x{k}")));
    check_header(&headers, &expected, path)?;
    if d < 5 {
        return Err(Error::parse(path.display().to_string(), format!("need at least 5 covariates, found {d}")));
    }
    let mut ds = SyntheticDataset {
        x: Tensor::scalar(0.0),
        treated: Vec::new(),
        y: Vec::new(),
        y0: Vec::new(),
        y1: Vec::new(),
        mu0: Vec::new(),
        tau: Vec::new(),
        propensity: None,
    };
    let mut x = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::parse(format!("row {row}"), e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(Error::parse(format!("row {row}"), format!("expected {} fields, found {}", expected.len(), rec.len())));
        }
        ds.treated.push(parse_treatment(&rec, row, 0, "a")?);
        ds.y.push(parse_cell(&rec, row, 1, "y")?);
        ds.y0.push(parse_cell(&rec, row, 2, "y0")?);
        ds.y1.push(parse_cell(&rec, row, 3, "y1")?);
        ds.tau.push(parse_cell(&rec, row, 4, "tau")?);
        let start = x.len();
        for k in 0..d {
            x.push(parse_cell(&rec, row, 5 + k, &expected[5 + k])?);
        }
        ds.mu0.push(baseline(&x[start..]));
    }
    if ds.treated.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no data rows"));
    }
    ds.x = Tensor::from_parts(vec![ds.treated.len(), d], x);
    Ok(ds)
}

/// One IHDP replication: header `treatment,y_factual,y_cfactual,mu0,mu1,x1..x25`.
pub fn load_ihdp(path: &Path) -> Result<IhdpDataset> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?.clone();
    let mut expected: Vec<String> = ["treatment", "y_factual", "y_cfactual", "mu0", "mu1"].iter().map(|s| s.to_string()).collect();
    expected.extend((1..=IHDP_COVARIATES).map(|k| format!("x{k}")));
    check_header(&headers, &expected, path)?;

    let (mut treated, mut y, mut y_cf, mut mu0, mut mu1, mut x) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::parse(format!("row {row}"), e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(Error::parse(format!("row {row}"), format!("expected {} fields, found {}", expected.len(), rec.len())));
        }
        treated.push(parse_treatment(&rec, row, 0, "treatment")?);
        y.push(parse_cell(&rec, row, 1, "y_factual")?);
        y_cf.push(parse_cell(&rec, row, 2, "y_cfactual")?);
        mu0.push(parse_cell(&rec, row, 3, "mu0")?);
        mu1.push(parse_cell(&rec, row, 4, "mu1")?);
        for k in 0..IHDP_COVARIATES {
            x.push(parse_cell(&rec, row, 5 + k, &expected[5 + k])?);
        }
    }
    if treated.is_empty() {
        return Err(Error::parse(path.display().to_string(), "no data rows"));
    }
    let n = treated.len();
    Ok(IhdpDataset { x: Tensor::from_parts(vec![n, IHDP_COVARIATES], x), treated, y, y_cf, mu0, mu1 })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Train and validation units together ("in-sample").
    pub fn in_sample(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        v.sort_unstable();
        v
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.2, 0.1];

/// Random disjoint partition; validation and test sizes are rounded and the
/// training split takes the remainder.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(Error::Precondition(format!("split needs n >= 10, got {n}")));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
    }
    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_test = (n as f64 * fractions[2]).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::Precondition(format!("degenerate split sizes for n = {n} and fractions {fractions:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    CounterRng::new(seed).shuffle(&mut idx);
    let n_train = n - n_val - n_test;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Column-wise standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, what: &str) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 && std.is_finite() {
        (mean, std)
    } else {
        log::warn!("{what} has zero variance on the training split; using std = 1");
        (mean, 1.0)
    }
}

impl Standardizer {
    pub fn fit(train: &CausalData) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Precondition("cannot fit a standardizer on an empty split".into()));
        }
        let d = train.d_x();
        let n = train.len();
        let mut x_mean = Vec::with_capacity(d);
        let mut x_std = Vec::with_capacity(d);
        for k in 0..d {
            let (m, s) = mean_std((0..n).map(|i| train.x.get(i, k)), &format!("covariate x{}", k + 1));
            x_mean.push(m);
            x_std.push(s);
        }
        let (y_mean, y_std) = mean_std(train.y.iter().copied(), "outcome");
        Ok(Self { x_mean, x_std, y_mean, y_std })
    }

    pub fn identity(d_x: usize) -> Self {
        Self { x_mean: vec![0.0; d_x], x_std: vec![1.0; d_x], y_mean: 0.0, y_std: 1.0 }
    }

    pub fn apply_x(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.x_mean.len();
        if x.cols() != d {
            return Err(Error::Shape { op: "standardize", lhs: x.shape().to_vec(), rhs: vec![d] });
        }
        let vals = x
            .values()
            .chunks_exact(d)
            .flat_map(|r| r.iter().enumerate().map(|(k, v)| (v - self.x_mean[k]) / self.x_std[k]))
            .collect();
        Tensor::matrix(x.rows(), d, vals)
    }

    pub fn apply_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn invert_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formulas_at_origin() {
        let z = [0.0; 5];
        assert_eq!(baseline(&z), 0.5);
        assert_eq!(effect(&z), 1.0);
        assert_eq!(propensity_logit(&z), 0.5);
        assert!((sigmoid(0.5) - 0.622_459_331_201_854_6).abs() < 1e-15);
    }

    #[test]
    fn consistency_and_overlap_by_construction() {
        let ds = gen_setting_a(500, 6, 3).unwrap();
        for i in 0..500 {
            let a = if ds.treated[i] { 1.0 } else { 0.0 };
            assert_eq!(ds.y[i], a * ds.y1[i] + (1.0 - a) * ds.y0[i]);
            assert!((ds.y1[i] - ds.y0[i] - ds.tau[i]).abs() < 10.0);
        }
        assert!(ds.propensity.unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn generators_reject_small_d() {
        assert!(matches!(gen_setting_a(10, 4, 0), Err(Error::Precondition(_))));
        assert!(matches!(gen_setting_b(10, 3, 0.5, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn generators_deterministic() {
        assert_eq!(gen_setting_a(50, 5, 9).unwrap(), gen_setting_a(50, 5, 9).unwrap());
        assert_eq!(gen_setting_b(50, 5, 0.5, 9).unwrap(), gen_setting_b(50, 5, 0.5, 9).unwrap());
        assert_ne!(gen_setting_a(50, 5, 9).unwrap(), gen_setting_a(50, 5, 10).unwrap());
    }

    #[test]
    fn split_sizes_and_partition() {
        let s = split(100, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 20, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split(100, DEFAULT_FRACTIONS, 1).unwrap());
        assert_ne!(s, split(100, DEFAULT_FRACTIONS, 2).unwrap());
    }

    #[test]
    fn split_rejects_degenerate() {
        assert!(split(9, DEFAULT_FRACTIONS, 0).is_err());
        assert!(split(100, [0.5, 0.2, 0.2], 0).is_err());
        assert!(split(10, [0.98, 0.01, 0.01], 0).is_err());
    }

    #[test]
    fn standardizer_moments_and_round_trip() {
        let data: CausalData = gen_setting_a(300, 5, 4).unwrap().into();
        let st = Standardizer::fit(&data).unwrap();
        let ys: Vec<f64> = data.y.iter().map(|&y| st.apply_y(y)).collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let s = (ys.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / ys.len() as f64).sqrt();
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        for &y in &data.y {
            assert!((st.invert_y(st.apply_y(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_column_gets_unit_std() {
        let x = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let data = CausalData { x, treated: vec![false, true, false], y: vec![1.0, 2.0, 3.0], truth: None };
        let st = Standardizer::fit(&data).unwrap();
        assert_eq!(st.x_std[1], 1.0);
        assert_eq!(st.apply_x(&data.x).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn validation_uses_train_statistics() {
        let data: CausalData = gen_setting_a(200, 5, 8).unwrap().into();
        let s = split(200, DEFAULT_FRACTIONS, 0).unwrap();
        let train = data.subset(&s.train);
        let val = data.subset(&s.val);
        let st = Standardizer::fit(&train).unwrap();
        let own = Standardizer::fit(&val).unwrap();
        assert_ne!(st, own);
        let y0 = st.apply_y(val.y[0]);
        assert_eq!(y0, (val.y[0] - st.y_mean) / st.y_std);
    }
}
