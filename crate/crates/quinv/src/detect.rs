//! Photocount channels, compound-beam assembly, the click-detector response
//! matrix, and EM maximum-likelihood photon-number reconstruction.
//!
//! The detector is an `N_d`-pixel click detector with efficiency `η` and
//! per-pixel dark-count probability `D = d/N_d`.  Its response matrix is
//! evaluated through the pixel-occupancy recursion (exactly equivalent to
//! the published inclusion–exclusion formula but free of its catastrophic
//! cancellation at large `n` and `η`).

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Photocount channels
// ---------------------------------------------------------------------------

/// Two synchronized click channels (signal and idler), one entry per
/// detection window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhotocountChannels {
    pub signal: Vec<u16>,
    pub idler: Vec<u16>,
}

impl PhotocountChannels {
    pub fn new(signal: Vec<u16>, idler: Vec<u16>) -> Result<Self> {
        if signal.len() != idler.len() {
            return Err(Error::validation(format!(
                "channel length mismatch: {} signal vs {} idler windows",
                signal.len(),
                idler.len()
            )));
        }
        Ok(PhotocountChannels { signal, idler })
    }

    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    /// CSV with a header row and columns `signal_clicks,idler_clicks`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("signal_clicks,idler_clicks\n");
        for (a, b) in self.signal.iter().zip(&self.idler) {
            s.push_str(&format!("{a},{b}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        // `#` lines carry embedded run metadata and are not data.
        let body: String = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let mut signal = Vec::new();
        let mut idler = Vec::new();
        for record in reader.records() {
            let r = record.map_err(|e| Error::format(e.to_string()))?;
            if r.len() != 2 {
                return Err(Error::format(format!("expected 2 columns, got {}", r.len())));
            }
            let parse = |s: &str| -> Result<u16> {
                s.trim()
                    .parse::<u16>()
                    .map_err(|e| Error::format(format!("bad click count: {e}")))
            };
            signal.push(parse(&r[0])?);
            idler.push(parse(&r[1])?);
        }
        PhotocountChannels::new(signal, idler)
    }

    /// Binary format (little-endian): magic `QCHN`, version u8, window count
    /// u64, then interleaved `(signal,idler)` pairs as u16.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(13 + 4 * self.len());
        buf.extend_from_slice(b"QCHN");
        buf.push(1);
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (a, b) in self.signal.iter().zip(&self.idler) {
            buf.extend_from_slice(&a.to_le_bytes());
            buf.extend_from_slice(&b.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut header = [0u8; 13];
        file.read_exact(&mut header)?;
        if &header[0..4] != b"QCHN" || header[4] != 1 {
            return Err(Error::format("bad channel file header"));
        }
        let n = u64::from_le_bytes(header[5..13].try_into().unwrap()) as usize;
        let mut body = vec![0u8; 4 * n];
        file.read_exact(&mut body)?;
        let mut signal = Vec::with_capacity(n);
        let mut idler = Vec::with_capacity(n);
        for chunk in body.chunks_exact(4) {
            signal.push(u16::from_le_bytes([chunk[0], chunk[1]]));
            idler.push(u16::from_le_bytes([chunk[2], chunk[3]]));
        }
        PhotocountChannels::new(signal, idler)
    }
}

// ---------------------------------------------------------------------------
// Joint distributions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    PhotocountHistogram,
    PhotonDistribution,
}

impl std::fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistributionKind::PhotocountHistogram => write!(f, "photocount_histogram"),
            DistributionKind::PhotonDistribution => write!(f, "photon_distribution"),
        }
    }
}

/// A normalized distribution over a truncated 3-axis grid (`shape[j] = 1`
/// for unused beams); row-major storage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointDistribution {
    pub n_beams: usize,
    pub shape: [usize; 3],
    pub kind: DistributionKind,
    mass: Vec<f64>,
}

impl JointDistribution {
    pub fn zeros(n_beams: usize, shape: [usize; 3], kind: DistributionKind) -> Self {
        JointDistribution {
            n_beams,
            shape,
            kind,
            mass: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    /// Builds from raw mass, checking non-negativity and normalization.
    pub fn from_mass(
        n_beams: usize,
        shape: [usize; 3],
        kind: DistributionKind,
        mass: Vec<f64>,
    ) -> Result<Self> {
        if mass.len() != shape[0] * shape[1] * shape[2] {
            return Err(Error::validation(format!(
                "mass length {} does not match shape {shape:?}",
                mass.len()
            )));
        }
        if mass.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::validation("distribution mass must be finite and ≥ 0"));
        }
        let d = JointDistribution {
            n_beams,
            shape,
            kind,
            mass,
        };
        d.check_normalized(1e-9)?;
        Ok(d)
    }

    fn flat(&self, n: [usize; 3]) -> usize {
        (n[0] * self.shape[1] + n[1]) * self.shape[2] + n[2]
    }

    pub fn get(&self, n: [usize; 3]) -> f64 {
        self.mass[self.flat(n)]
    }

    pub fn set(&mut self, n: [usize; 3], v: f64) {
        let i = self.flat(n);
        self.mass[i] = v;
    }

    pub fn add(&mut self, n: [usize; 3], v: f64) {
        let i = self.flat(n);
        self.mass[i] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.mass
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let t = self.total();
        if t <= 0.0 {
            return Err(Error::validation("cannot normalize zero-mass distribution"));
        }
        for x in &mut self.mass {
            *x /= t;
        }
        Ok(())
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let t = self.total();
        if (t - 1.0).abs() > tol {
            return Err(Error::validation(format!(
                "distribution mass {t} deviates from 1 beyond {tol}"
            )));
        }
        Ok(())
    }

    /// Mass on the outermost shell of any active axis (truncation audit).
    pub fn top_bin_mass(&self) -> f64 {
        let mut acc = 0.0;
        for (n, v) in self.iter() {
            if (0..self.n_beams).any(|j| self.shape[j] > 1 && n[j] == self.shape[j] - 1) {
                acc += v;
            }
        }
        acc
    }

    pub fn iter(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        let shape = self.shape;
        self.mass.iter().enumerate().map(move |(i, &v)| {
            let n3 = i % shape[2];
            let rest = i / shape[2];
            ([rest / shape[1], rest % shape[1], n3], v)
        })
    }

    pub fn mean(&self, axis: usize) -> f64 {
        self.iter().map(|(n, v)| n[axis] as f64 * v).sum()
    }

    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.shape[axis]];
        for (n, v) in self.iter() {
            out[n[axis]] += v;
        }
        out
    }

    /// Point mass at `at`.
    pub fn delta(n_beams: usize, shape: [usize; 3], at: [usize; 3], kind: DistributionKind) -> Self {
        let mut d = Self::zeros(n_beams, shape, kind);
        d.set(at, 1.0);
        d
    }

    /// CSV: a `#` metadata line, header, rows `c1,c2,c3,mass` (zeros skipped).
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# n_beams={} shape={}x{}x{} kind={}\nc1,c2,c3,mass\n",
            self.n_beams, self.shape[0], self.shape[1], self.shape[2], self.kind
        );
        for (n, v) in self.iter() {
            if v != 0.0 {
                s.push_str(&format!("{},{},{},{:.17e}\n", n[0], n[1], n[2], v));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::format("distribution CSV must start with a `#` metadata line"))?;
        let mut n_beams = None;
        let mut shape = None;
        let mut kind = None;
        for field in meta.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad metadata field `{field}`")))?;
            match k {
                "n_beams" => {
                    n_beams = Some(v.parse::<usize>().map_err(|e| Error::format(e.to_string()))?)
                }
                "shape" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|e| Error::format(e.to_string())))
                        .collect::<Result<_>>()?;
                    if dims.len() != 3 {
                        return Err(Error::format("shape must have three axes"));
                    }
                    shape = Some([dims[0], dims[1], dims[2]]);
                }
                "kind" => {
                    kind = Some(match v {
                        "photocount_histogram" => DistributionKind::PhotocountHistogram,
                        "photon_distribution" => DistributionKind::PhotonDistribution,
                        other => return Err(Error::format(format!("unknown kind `{other}`"))),
                    })
                }
                other => return Err(Error::format(format!("unknown metadata key `{other}`"))),
            }
        }
        let (n_beams, shape, kind) = match (n_beams, shape, kind) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::format("metadata must carry n_beams, shape, kind")),
        };
        let mut d = Self::zeros(n_beams, shape, kind);
        // Further `#` lines carry embedded run metadata and are not data.
        let body: String = lines
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        for record in reader.records() {
            let r = record.map_err(|e| Error::format(e.to_string()))?;
            let parse_idx = |i: usize| -> Result<usize> {
                r[i].trim()
                    .parse::<usize>()
                    .map_err(|e| Error::format(format!("bad index: {e}")))
            };
            let n = [parse_idx(0)?, parse_idx(1)?, parse_idx(2)?];
            for j in 0..3 {
                if n[j] >= shape[j] {
                    return Err(Error::format(format!("index {n:?} outside shape {shape:?}")));
                }
            }
            let v = r[3]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::format(format!("bad mass: {e}")))?;
            d.set(n, v);
        }
        d.check_normalized(1e-6)?;
        Ok(d)
    }

    /// Dense binary format (little-endian): magic `QDST`, version u8, kind
    /// u8, n_beams u8, shape 3×u32, then `f64` mass in row-major order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"QDST")?;
        f.write_all(&[
            1,
            match self.kind {
                DistributionKind::PhotocountHistogram => 0,
                DistributionKind::PhotonDistribution => 1,
            },
            self.n_beams as u8,
        ])?;
        for s in self.shape {
            f.write_all(&(s as u32).to_le_bytes())?;
        }
        for v in &self.mass {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 19 || &bytes[0..4] != b"QDST" || bytes[4] != 1 {
            return Err(Error::format("bad distribution file header"));
        }
        let kind = match bytes[5] {
            0 => DistributionKind::PhotocountHistogram,
            1 => DistributionKind::PhotonDistribution,
            other => return Err(Error::format(format!("unknown kind byte {other}"))),
        };
        let n_beams = bytes[6] as usize;
        let mut shape = [0usize; 3];
        for j in 0..3 {
            shape[j] =
                u32::from_le_bytes(bytes[7 + 4 * j..11 + 4 * j].try_into().unwrap()) as usize;
        }
        let n = shape[0] * shape[1] * shape[2];
        let body = &bytes[19..];
        if body.len() != 8 * n {
            return Err(Error::format("distribution payload size mismatch"));
        }
        let mass: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        JointDistribution::from_mass(n_beams, shape, kind, mass)
    }
}

// ---------------------------------------------------------------------------
// Detector model and response matrix
// ---------------------------------------------------------------------------

/// An `N_d`-pixel click detector with mean efficiency and total dark count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectorModel {
    pub n_pixels: usize,
    pub efficiency: f64,
    pub dark_total: f64,
}

impl DetectorModel {
    pub fn new(n_pixels: usize, efficiency: f64, dark_total: f64) -> Result<Self> {
        let det = DetectorModel {
            n_pixels,
            efficiency,
            dark_total,
        };
        det.validate()?;
        Ok(det)
    }

    /// The effective per-beam detector of a compound state: `N_d = 2w_p+w_n`,
    /// `η = (η_s+η_i)/2`, `d = (d_s+d_i)(2w_p+w_n/2)`.
    pub fn effective(
        w_p: usize,
        w_n: usize,
        eta_s: f64,
        eta_i: f64,
        d_s: f64,
        d_i: f64,
    ) -> Result<Self> {
        DetectorModel::new(
            2 * w_p + w_n,
            (eta_s + eta_i) / 2.0,
            (d_s + d_i) * (2.0 * w_p as f64 + w_n as f64 / 2.0),
        )
    }

    pub fn dark_per_pixel(&self) -> f64 {
        self.dark_total / self.n_pixels as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels == 0 {
            return Err(Error::validation("detector must have at least one pixel"));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::validation(format!(
                "efficiency {} outside [0,1]",
                self.efficiency
            )));
        }
        if self.dark_total < 0.0 || self.dark_per_pixel() >= 1.0 {
            return Err(Error::validation(format!(
                "dark count {} gives per-pixel probability outside [0,1)",
                self.dark_total
            )));
        }
        Ok(())
    }
}

/// Detection matrix `T(c,n)` for `c = 0…N_d`, `n = 0…n_max`.
#[derive(Debug, Clone)]
pub struct DetectionMatrix {
    pub n_pixels: usize,
    pub n_max: usize,
    /// Row-major `[c][n]`.
    t: Vec<f64>,
}

impl DetectionMatrix {
    /// `T(c,n)`; `c > N_d` is probability 0 by definition.
    pub fn prob(&self, c: usize, n: usize) -> f64 {
        if c > self.n_pixels {
            log::debug!("T(c={c},n={n}) requested with c > N_d = {}; 0 by definition", self.n_pixels);
            return 0.0;
        }
        assert!(n <= self.n_max, "n = {n} beyond tabulated n_max = {}", self.n_max);
        self.t[c * (self.n_max + 1) + n]
    }

    pub fn column_sum(&self, n: usize) -> f64 {
        (0..=self.n_pixels).map(|c| self.prob(c, n)).sum()
    }
}

/// Builds the detection matrix via the pixel-occupancy recursion:
/// with `P_n(k)` the probability that `k` of the `N_d` pixels hold at least
/// one detected photon after `n` incident photons,
/// `P_{n+1}(k) = P_n(k)[(1−η)+ηk/N_d] + P_n(k−1)·η(N_d−k+1)/N_d`, and
/// `T(c,n) = Σ_k P_n(k)·C(N_d−k,c−k)·D^{c−k}(1−D)^{N_d−c}`.
///
/// All terms are non-negative, so the evaluation is numerically exact in
/// contrast to the equivalent inclusion–exclusion (alternating-sum) form.
pub fn detection_matrix(det: &DetectorModel, n_max: usize) -> Result<DetectionMatrix> {
    det.validate()?;
    let nd = det.n_pixels;
    let eta = det.efficiency;
    let dd = det.dark_per_pixel();

    // Dark-click completion: dark[k][c] = C(N_d−k, c−k) D^{c−k} (1−D)^{N_d−c}.
    let mut binom = vec![vec![0.0f64; nd + 1]; nd + 1];
    for (n, row) in binom.iter_mut().enumerate() {
        row[0] = 1.0;
        for k in 1..=n {
            let mut acc = 1.0;
            for i in 0..k {
                acc = acc * (n - i) as f64 / (i + 1) as f64;
            }
            row[k] = acc;
        }
    }

    let mut t = vec![0.0f64; (nd + 1) * (n_max + 1)];
    let mut occ = vec![0.0f64; nd + 1];
    occ[0] = 1.0;
    for n in 0..=n_max {
        for c in 0..=nd {
            let mut acc = 0.0;
            for (k, &p) in occ.iter().enumerate().take(c + 1) {
                if p == 0.0 {
                    continue;
                }
                let free = nd - k;
                let extra = c - k;
                if extra > free {
                    continue;
                }
                acc += p
                    * binom[free][extra]
                    * dd.powi(extra as i32)
                    * (1.0 - dd).powi((nd - c) as i32);
            }
            t[c * (n_max + 1) + n] = acc;
        }
        // Advance occupancy by one photon.
        let mut next = vec![0.0f64; nd + 1];
        for (k, &p) in occ.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            next[k] += p * ((1.0 - eta) + eta * k as f64 / nd as f64);
            if k + 1 <= nd {
                next[k + 1] += p * eta * (nd - k) as f64 / nd as f64;
            }
        }
        occ = next;
    }
    Ok(DetectionMatrix {
        n_pixels: nd,
        n_max,
        t,
    })
}

// ---------------------------------------------------------------------------
// Forward map and EM reconstruction
// ---------------------------------------------------------------------------

fn detectors_for(dets: &[DetectorModel], n_beams: usize) -> Result<Vec<DetectorModel>> {
    match dets.len() {
        1 => Ok(vec![dets[0]; n_beams]),
        n if n == n_beams => Ok(dets.to_vec()),
        n => Err(Error::validation(format!(
            "{n} detectors given for {n_beams} beams"
        ))),
    }
}

/// Contracts `data` (shape `shape`) along `axis` with `mat[out][in]`.
fn contract_axis(
    data: &[f64],
    shape: [usize; 3],
    axis: usize,
    mat: &dyn Fn(usize, usize) -> f64,
    out_dim: usize,
) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = out_dim;
    let mut out = vec![0.0f64; out_shape[0] * out_shape[1] * out_shape[2]];
    let flat = |s: [usize; 3], n: [usize; 3]| (n[0] * s[1] + n[1]) * s[2] + n[2];
    for i0 in 0..shape[0] {
        for i1 in 0..shape[1] {
            for i2 in 0..shape[2] {
                let v = data[flat(shape, [i0, i1, i2])];
                if v == 0.0 {
                    continue;
                }
                let idx = [i0, i1, i2];
                for o in 0..out_dim {
                    let w = mat(o, idx[axis]);
                    if w == 0.0 {
                        continue;
                    }
                    let mut oi = idx;
                    oi[axis] = o;
                    out[flat(out_shape, oi)] += v * w;
                }
            }
        }
    }
    (out, out_shape)
}

/// Applies the three per-beam detection matrices to a photon-number
/// distribution, producing the predicted photocount distribution.
pub fn forward_map(p: &JointDistribution, dets: &[DetectorModel]) -> Result<JointDistribution> {
    if p.kind != DistributionKind::PhotonDistribution {
        return Err(Error::validation("forward_map expects a photon distribution"));
    }
    let dets = detectors_for(dets, p.n_beams)?;
    let mut data = p.data().to_vec();
    let mut shape = p.shape;
    for (j, det) in dets.iter().enumerate().take(p.n_beams) {
        let tm = detection_matrix(det, shape[j].saturating_sub(1))?;
        let out_dim = det.n_pixels + 1;
        let (next, next_shape) =
            contract_axis(&data, shape, j, &|c, n| tm.prob(c, n), out_dim);
        data = next;
        shape = next_shape;
    }
    let total: f64 = data.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::numerical(format!(
            "forward map lost {:.3e} probability mass",
            1.0 - total
        )));
    }
    // Tolerate ≤1e-6 drift (asserted above) by renormalizing.
    for v in &mut data {
        *v /= total;
    }
    JointDistribution::from_mass(p.n_beams, shape, DistributionKind::PhotocountHistogram, data)
}

/// EM reconstruction options.
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Relative log-likelihood improvement threshold.
    pub tol: f64,
    /// Photon-axis truncation (per active beam).
    pub photon_shape: [usize; 3],
    /// Optional starting distribution; uniform over the grid when `None`.
    pub init: Option<JointDistribution>,
}

impl EmOptions {
    pub fn new(photon_shape: [usize; 3]) -> Self {
        EmOptions {
            max_iters: 100_000,
            tol: 1e-10,
            photon_shape,
            init: None,
        }
    }
}

/// Convergence metadata of an EM run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmReport {
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    /// `KL(f ‖ forward_map(p̂))` at the returned iterate.
    pub kl_divergence: f64,
    /// Log-likelihood after each iteration (entry 0 is the starting value);
    /// monotonically nondecreasing for a correct EM update.
    pub log_likelihood_trace: Vec<f64>,
}

/// Expectation–maximization (Vardi-type) reconstruction of the photon-number
/// distribution from a photocount histogram.
pub fn reconstruct_em(
    f: &JointDistribution,
    dets: &[DetectorModel],
    opts: &EmOptions,
) -> Result<(JointDistribution, EmReport)> {
    if f.kind != DistributionKind::PhotocountHistogram {
        return Err(Error::validation("reconstruct_em expects a photocount histogram"));
    }
    f.check_normalized(1e-6)?;
    let n_beams = f.n_beams;
    let dets = detectors_for(dets, n_beams)?;
    let mut pshape = opts.photon_shape;
    for j in n_beams..3 {
        pshape[j] = 1;
    }

    // Per-axis detection matrices.
    let mut mats = Vec::new();
    for (j, det) in dets.iter().enumerate().take(n_beams) {
        if f.shape[j] > det.n_pixels + 1 {
            return Err(Error::validation(format!(
                "histogram axis {j} has {} bins but the detector supports counts 0..={}",
                f.shape[j], det.n_pixels
            )));
        }
        mats.push(detection_matrix(det, pshape[j] - 1)?);
    }

    let mut p: Vec<f64> = match &opts.init {
        Some(seed) => {
            if seed.shape != pshape {
                return Err(Error::validation("EM seed shape mismatch"));
            }
            seed.data().to_vec()
        }
        None => {
            let n = pshape[0] * pshape[1] * pshape[2];
            vec![1.0 / n as f64; n]
        }
    };

    let count_shape = {
        let mut s = [1usize; 3];
        for j in 0..n_beams {
            s[j] = f.shape[j];
        }
        s
    };
    let forward = |p: &[f64]| -> Vec<f64> {
        let mut data = p.to_vec();
        let mut shape = pshape;
        for (j, tm) in mats.iter().enumerate() {
            // Project directly onto the histogram's count range.
            let (next, next_shape) =
                contract_axis(&data, shape, j, &|c, n| tm.prob(c, n), count_shape[j]);
            data = next;
            shape = next_shape;
        }
        data
    };
    let backward = |ff: &[f64]| -> Vec<f64> {
        let mut data = ff.to_vec();
        let mut shape = count_shape;
        for (j, tm) in mats.iter().enumerate() {
            let (next, next_shape) =
                contract_axis(&data, shape, j, &|n, c| tm.prob(c, n), pshape[j]);
            data = next;
            shape = next_shape;
        }
        data
    };

    let loglik = |q: &[f64]| -> Result<f64> {
        let mut acc = 0.0;
        for (i, (&fv, &qv)) in f.data().iter().zip(q).enumerate() {
            if fv > 0.0 {
                if qv <= 0.0 {
                    let n3 = i % count_shape[2];
                    let rest = i / count_shape[2];
                    return Err(Error::numerical(format!(
                        "histogram bin ({},{},{}) has zero predicted probability",
                        rest / count_shape[1],
                        rest % count_shape[1],
                        n3
                    )));
                }
                acc += fv * qv.ln();
            }
        }
        Ok(acc)
    };

    let mut q = forward(&p);
    let mut ll = loglik(&q)?;
    let mut ll_trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        iterations += 1;
        // F = f/q on the support of f; update p ← p ∘ Aᵀ F.
        let ratio: Vec<f64> = f
            .data()
            .iter()
            .zip(&q)
            .map(|(&fv, &qv)| if fv > 0.0 { fv / qv } else { 0.0 })
            .collect();
        let gain = backward(&ratio);
        for (pi, gi) in p.iter_mut().zip(&gain) {
            *pi *= gi;
        }
        q = forward(&p);
        let next_ll = loglik(&q)?;
        debug_assert!(
            next_ll >= ll - 1e-9 * ll.abs().max(1.0),
            "EM log-likelihood decreased: {ll} → {next_ll}"
        );
        let improvement = (next_ll - ll).abs() / ll.abs().max(1.0);
        ll = next_ll;
        ll_trace.push(ll);
        if improvement < opts.tol {
            converged = true;
            break;
        }
    }
    // Guard against floating drift; columns of T sum to 1 so this is tiny.
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x /= total;
    }

    let kl = f
        .data()
        .iter()
        .zip(&q)
        .map(|(&fv, &qv)| if fv > 0.0 { fv * (fv / qv).ln() } else { 0.0 })
        .sum();
    let dist = JointDistribution {
        n_beams,
        shape: pshape,
        kind: DistributionKind::PhotonDistribution,
        mass: p,
    };
    if !converged {
        log::warn!("EM stopped at max_iters = {} without meeting tol {}", opts.max_iters, opts.tol);
    }
    Ok((
        dist,
        EmReport {
            iterations,
            converged,
            log_likelihood: ll,
            kl_divergence: kl,
            log_likelihood_trace: ll_trace,
        },
    ))
}

// ---------------------------------------------------------------------------
// Compound-beam assembly
// ---------------------------------------------------------------------------

/// Options for compound-realization assembly.
#[derive(Debug, Clone)]
pub struct CompoundOptions {
    /// Separation (in windows) between the correlated block and the noise
    /// block of one realization; must be ≥ 1000.
    pub noise_offset_stride: usize,
    /// Reuse windows by advancing one window per realization instead of a
    /// full block (enhances statistics at the cost of independence).
    pub overlap: bool,
}

impl Default for CompoundOptions {
    fn default() -> Self {
        CompoundOptions {
            noise_offset_stride: 1000,
            overlap: false,
        }
    }
}

/// Per-realization photocounts `(c₁,c₂,c₃)` of the compound 3-beam state
/// starting at correlated window `j` and noise window `j̃` (both 0-based).
fn compound_counts(
    ch: &PhotocountChannels,
    w_p: usize,
    w_n: usize,
    j: usize,
    jt: usize,
) -> [u32; 3] {
    let s = |i: usize| ch.signal[i] as u32;
    let i = |x: usize| ch.idler[x] as u32;
    let mut c = [0u32; 3];
    for k in 1..=w_p {
        let base = j + 6 * k - 6;
        c[0] += s(base) + i(base + 2) + i(base + 3) + s(base + 5);
        c[1] += i(base) + s(base + 1) + s(base + 3) + i(base + 4);
        c[2] += i(base + 1) + s(base + 2) + s(base + 4) + i(base + 5);
    }
    for k in 1..=w_n / 2 {
        let base = jt + 6 * k - 6;
        c[0] += s(base) + i(base + 3);
        c[1] += s(base + 1) + i(base + 4);
        c[2] += s(base + 2) + i(base + 5);
    }
    c
}

/// Assembles the photocount histogram of the compound symmetric 3-beam state
/// from the synchronized signal/idler channels (exact index arithmetic of
/// the published window scheme; 6 windows per correlated unit, 6 reserved
/// windows per noise unit of which half are used).
pub fn build_compound_realizations(
    ch: &PhotocountChannels,
    w_p: usize,
    w_n: usize,
    opts: &CompoundOptions,
) -> Result<JointDistribution> {
    if w_n % 2 != 0 {
        return Err(Error::validation(format!("w_n = {w_n} must be even")));
    }
    if w_p == 0 && w_n == 0 {
        return Err(Error::validation("w_p and w_n cannot both be zero"));
    }
    if opts.noise_offset_stride < 1000 {
        return Err(Error::validation(format!(
            "noise offset stride {} below the required 1000-window separation",
            opts.noise_offset_stride
        )));
    }
    let corr_len = 6 * w_p;
    let noise_len = 3 * w_n; // Reserved length; only half the windows are read.
    let block = corr_len + noise_len;
    let offset = corr_len + opts.noise_offset_stride;
    let needed = offset + noise_len;
    if ch.len() < needed.max(block) {
        return Err(Error::validation(format!(
            "channels hold {} windows but one realization needs {}",
            ch.len(),
            needed.max(block)
        )));
    }

    let step = if opts.overlap { 1 } else { block.max(1) };
    let mut counts: Vec<([u32; 3], u64)> = Vec::new();
    let mut tally = std::collections::HashMap::new();
    let mut j = 0usize;
    let mut max_c = 0u32;
    let mut n_real = 0u64;
    while j + offset + noise_len <= ch.len() && j + corr_len <= ch.len() {
        let jt = j + offset;
        let c = compound_counts(ch, w_p, w_n, j, jt);
        max_c = max_c.max(c[0]).max(c[1]).max(c[2]);
        *tally.entry(c).or_insert(0u64) += 1;
        n_real += 1;
        j += step;
    }
    if n_real == 0 {
        return Err(Error::validation("channels too short for any realization"));
    }
    counts.extend(tally);

    let dim = max_c as usize + 1;
    let mut hist = JointDistribution::zeros(
        3,
        [dim, dim, dim],
        DistributionKind::PhotocountHistogram,
    );
    for (c, n) in counts {
        hist.add(
            [c[0] as usize, c[1] as usize, c[2] as usize],
            n as f64 / n_real as f64,
        );
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive, Zero};

    fn rat(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    /// Literal published inclusion–exclusion form of T(c,n), in exact
    /// rational arithmetic (the float version cancels catastrophically).
    fn eq16_rational(c: usize, n: usize, nd: usize, eta: &BigRational, dark: &BigRational) -> f64 {
        let binom = |n: usize, k: usize| -> BigRational {
            let mut acc = BigRational::one();
            for i in 0..k {
                acc = acc * rat((n - i) as i64, 1) / rat((i + 1) as i64, 1);
            }
            acc
        };
        let one = BigRational::one();
        let pow = |x: &BigRational, e: usize| -> BigRational {
            let mut acc = BigRational::one();
            for _ in 0..e {
                acc *= x;
            }
            acc
        };
        let mut sum = BigRational::zero();
        for l in 0..=c {
            // (−1)^l (1−D)^{−l} binom(c,l) ((1−η) + lη/N_d)^n, folding the
            // printed (1−η)^n (1 + lη/((1−η)N_d))^n product into one base.
            let base = (&one - eta) + eta * rat(l as i64, nd as i64);
            let mut term = binom(c, l) * pow(&base, n) / pow(&(&one - dark), l);
            if l % 2 == 1 {
                term = -term;
            }
            sum += term;
        }
        let mut t = binom(nd, c) * pow(&(&one - dark), nd) * sum;
        if c % 2 == 1 {
            t = -t;
        }
        t.to_f64().unwrap()
    }

    #[test]
    fn occupancy_matches_literal_eq16() {
        let det = DetectorModel::new(8, 0.55, 0.08).unwrap();
        let eta = rat(11, 20);
        let dark = rat(1, 100); // D = d/N_d = 0.08/8.
        let tm = detection_matrix(&det, 30).unwrap();
        for n in [0usize, 1, 2, 5, 12, 30] {
            for c in 0..=8 {
                let lit = eq16_rational(c, n, 8, &eta, &dark);
                let occ = tm.prob(c, n);
                assert!(
                    (lit - occ).abs() <= 1e-12 * lit.abs().max(1e-30),
                    "c={c} n={n}: literal {lit} vs occupancy {occ}"
                );
            }
        }
    }

    #[test]
    fn occupancy_matches_literal_at_large_eta_n() {
        // η=0.9, n=100: the alternating sum in float would lose ~all digits;
        // the rational literal form is exact and the occupancy recursion must
        // agree with it.
        let det = DetectorModel::new(66, 0.9, 0.0).unwrap();
        let eta = rat(9, 10);
        let dark = BigRational::zero();
        let tm = detection_matrix(&det, 100).unwrap();
        for c in [0usize, 10, 40, 60, 66] {
            let lit = eq16_rational(c, 100, 66, &eta, &dark);
            let occ = tm.prob(c, 100);
            assert!(
                (lit - occ).abs() <= 1e-12 * lit.abs().max(1e-30),
                "c={c}: literal {lit} vs occupancy {occ}"
            );
        }
    }

    #[test]
    fn column_normalization() {
        for &(nd, eta, d) in &[(12usize, 0.55, 0.01), (66, 0.9, 0.2), (66, 0.1, 0.0), (33, 0.5, 0.05)] {
            let det = DetectorModel::new(nd, eta, d).unwrap();
            let tm = detection_matrix(&det, 100).unwrap();
            for n in 0..=100 {
                let s = tm.column_sum(n);
                assert!((s - 1.0).abs() <= 1e-9, "N_d={nd} η={eta} d={d} n={n}: Σ={s}");
            }
        }
    }

    #[test]
    fn zero_dark_zero_count() {
        // d=0 ⇒ T(0,n) = (1−η)^n; η=0,d=0 ⇒ T(c,n) = δ_{c,0}.
        let det = DetectorModel::new(10, 0.3, 0.0).unwrap();
        let tm = detection_matrix(&det, 20).unwrap();
        for n in 0..=20 {
            assert!((tm.prob(0, n) - 0.7f64.powi(n as i32)).abs() < 1e-14);
        }
        let blind = DetectorModel::new(10, 0.0, 0.0).unwrap();
        let tb = detection_matrix(&blind, 5).unwrap();
        for n in 0..=5 {
            assert_eq!(tb.prob(0, n), 1.0);
            assert_eq!(tb.prob(3, n), 0.0);
        }
    }

    #[test]
    fn forward_single_photon_thinning() {
        let det = DetectorModel::new(40, 0.5, 0.0).unwrap();
        let p = JointDistribution::delta(
            3,
            [3, 3, 3],
            [1, 0, 0],
            DistributionKind::PhotonDistribution,
        );
        let f = forward_map(&p, &[det]).unwrap();
        assert!((f.get([1, 0, 0]) - 0.5).abs() < 1e-12);
        assert!((f.get([0, 0, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn em_exact_data_recovery() {
        // A known p*, exact histogram f = A p*: EM must drive KL below 1e-10
        // with a nondecreasing log-likelihood.
        let det = DetectorModel::new(8, 0.6, 0.01).unwrap();
        let mut p_star = JointDistribution::zeros(
            3,
            [4, 4, 4],
            DistributionKind::PhotonDistribution,
        );
        let mut total = 0.0;
        for (i, (n, _)) in p_star.clone().iter().enumerate() {
            let v = 1.0 / (1.0 + i as f64 + (n[0] + 2 * n[1] + 3 * n[2]) as f64);
            p_star.set(n, v);
            total += v;
        }
        for n in 0..4 {
            for m in 0..4 {
                for l in 0..4 {
                    p_star.set([n, m, l], p_star.get([n, m, l]) / total);
                }
            }
        }
        let f = forward_map(&p_star, &[det]).unwrap();
        // The log-likelihood stop must be well below the KL target: near the
        // optimum the residual KL is the geometric tail of the per-iteration
        // improvements, not the last improvement itself.
        let mut opts = EmOptions::new([4, 4, 4]);
        opts.tol = 1e-14;
        let (p_hat, report) = reconstruct_em(&f, &[det], &opts).unwrap();
        assert!(report.kl_divergence < 1e-10, "KL = {}", report.kl_divergence);
        assert!(report.converged);
        let f_hat = forward_map(&p_hat, &[det]).unwrap();
        for (n, v) in f.iter() {
            assert!((f_hat.get(n) - v).abs() < 1e-6, "{n:?}");
        }
    }

    #[test]
    fn em_recovers_identifiable_single_beam() {
        // 7 count bins vs 4 photon bins: the forward map is injective, so an
        // exact histogram pins down the truth.
        let det = DetectorModel::new(6, 0.6, 0.01).unwrap();
        let mut p_star = JointDistribution::zeros(1, [4, 1, 1], DistributionKind::PhotonDistribution);
        p_star.set([0, 0, 0], 0.4);
        p_star.set([1, 0, 0], 0.3);
        p_star.set([2, 0, 0], 0.2);
        p_star.set([3, 0, 0], 0.1);
        let f = forward_map(&p_star, &[det]).unwrap();
        let mut opts = EmOptions::new([4, 1, 1]);
        opts.tol = 1e-14;
        let (p, report) = reconstruct_em(&f, &[det], &opts).unwrap();
        assert!(report.kl_divergence < 1e-10, "KL = {}", report.kl_divergence);
        for n in 0..4 {
            assert!(
                (p.get([n, 0, 0]) - p_star.get([n, 0, 0])).abs() < 1e-3,
                "p({n}) = {} vs {}",
                p.get([n, 0, 0]),
                p_star.get([n, 0, 0])
            );
        }
    }

    #[test]
    fn em_zero_counts_concentrate_at_vacuum() {
        let det = DetectorModel::new(6, 0.5, 0.0).unwrap();
        let f = JointDistribution::delta(
            1,
            [1, 1, 1],
            [0, 0, 0],
            DistributionKind::PhotocountHistogram,
        );
        let (p, _) = reconstruct_em(&f, &[det], &EmOptions::new([6, 1, 1])).unwrap();
        assert!(p.get([0, 0, 0]) > 0.999, "p(0) = {}", p.get([0, 0, 0]));
    }

    #[test]
    fn em_fixed_point() {
        let det = DetectorModel::new(8, 0.7, 0.02).unwrap();
        let mut p0 = JointDistribution::zeros(1, [5, 1, 1], DistributionKind::PhotonDistribution);
        for n in 0..5 {
            p0.set([n, 0, 0], [0.5, 0.25, 0.15, 0.07, 0.03][n]);
        }
        let f = forward_map(&p0, &[det]).unwrap();
        let mut opts = EmOptions::new([5, 1, 1]);
        opts.init = Some(p0.clone());
        opts.max_iters = 3;
        opts.tol = 0.0;
        let (p, _) = reconstruct_em(&f, &[det], &opts).unwrap();
        for n in 0..5 {
            assert!((p.get([n, 0, 0]) - p0.get([n, 0, 0])).abs() < 1e-12);
        }
    }

    fn zero_channels(len: usize) -> PhotocountChannels {
        PhotocountChannels::new(vec![0; len], vec![0; len]).unwrap()
    }

    #[test]
    fn compound_zero_channels_delta() {
        let ch = zero_channels(3000);
        let h = build_compound_realizations(&ch, 2, 2, &CompoundOptions::default()).unwrap();
        assert_eq!(h.get([0, 0, 0]), 1.0);
    }

    #[test]
    fn compound_single_coincidence_trace() {
        // A coincidence in the first double window lands in c₁ (signal) and
        // c₂ (idler) of the realization starting there.
        let mut ch = zero_channels(3000);
        ch.signal[0] = 1;
        ch.idler[0] = 1;
        let mut opts = CompoundOptions::default();
        opts.overlap = false;
        let h = build_compound_realizations(&ch, 1, 0, &opts).unwrap();
        // First realization contributes (1,1,0); all others (0,0,0).
        let n_real = (ch.len() - (6 + 1000)) / 6 + 1;
        let expect = 1.0 / n_real as f64;
        assert!((h.get([1, 1, 0]) - expect).abs() < 1e-12);
    }

    #[test]
    fn compound_stride_guard() {
        let ch = zero_channels(3000);
        let mut opts = CompoundOptions::default();
        opts.noise_offset_stride = 10;
        assert!(build_compound_realizations(&ch, 1, 2, &opts).is_err());
    }

    #[test]
    fn channel_serialization_round_trip() {
        let ch = PhotocountChannels::new(vec![0, 1, 0, 1], vec![1, 0, 0, 1]).unwrap();
        let back = PhotocountChannels::from_csv(&ch.to_csv()).unwrap();
        assert_eq!(ch, back);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ch.bin");
        ch.write_binary(&path).unwrap();
        assert_eq!(PhotocountChannels::read_binary(&path).unwrap(), ch);
    }

    #[test]
    fn distribution_serialization_round_trip() {
        let mut d = JointDistribution::zeros(2, [2, 3, 1], DistributionKind::PhotonDistribution);
        d.set([0, 0, 0], 0.5);
        d.set([1, 2, 0], 0.5);
        let back = JointDistribution::from_csv(&d.to_csv()).unwrap();
        assert_eq!(back.shape, d.shape);
        assert_eq!(back.get([1, 2, 0]), 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        d.write_binary(&path).unwrap();
        let b2 = JointDistribution::read_binary(&path).unwrap();
        assert_eq!(b2.data(), d.data());
        assert_eq!(b2.kind, DistributionKind::PhotonDistribution);
    }
}
