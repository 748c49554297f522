//! Single-head attention kernels: gated operation self-attention, masked
//! context self-attention across rounds, and domain low-rank adapters.
//!
//! Linear maps follow `y = W x`, so token matrices are projected as
//! `X W^T`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::Mask;
use crate::scene::Domain;
use crate::weights::{WeightError, WeightFile};

/// Additive mask value for disallowed attention pairs.
pub const MASK_NEG: f64 = -1e9;

/// Context-attention projections that adapters may target.
pub const LORA_TARGETS: [&str; 3] = ["ctx_q", "ctx_k", "ctx_v"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown adapter target `{0}`")]
    UnknownTarget(String),
    #[error("adapter rank must be at least 1")]
    InvalidRank,
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (cols.max(1) as f32).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub d: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ctx_q: Array2<f64>,
    pub ctx_k: Array2<f64>,
    pub ctx_v: Array2<f64>,
    /// Condition bridge, `d x cond_dim`.
    pub cond_w: Array2<f64>,
    pub cond_b: Array1<f64>,
    /// Operation gate; zero at initialization.
    pub gamma: f64,
    /// Context gain; zero at initialization.
    pub lambda: f64,
}

impl AttentionParams {
    pub fn new(d: usize, cond_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams {
            d,
            wq: random_matrix(d, d, &mut rng),
            wk: random_matrix(d, d, &mut rng),
            wv: random_matrix(d, d, &mut rng),
            wo: random_matrix(d, d, &mut rng),
            ctx_q: random_matrix(d, d, &mut rng),
            ctx_k: random_matrix(d, d, &mut rng),
            ctx_v: random_matrix(d, d, &mut rng),
            cond_w: random_matrix(d, cond_dim, &mut rng),
            cond_b: Array1::zeros(d),
            gamma: 0.0,
            lambda: 0.0,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_w.ncols()
    }

    fn matrix(&self, name: &str) -> Option<&Array2<f64>> {
        Some(match name {
            "q" => &self.wq,
            "k" => &self.wk,
            "v" => &self.wv,
            "o" => &self.wo,
            "ctx_q" => &self.ctx_q,
            "ctx_k" => &self.ctx_k,
            "ctx_v" => &self.ctx_v,
            "cond_w" => &self.cond_w,
            _ => return None,
        })
    }

    fn matrix_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        Some(match name {
            "ctx_q" => &mut self.ctx_q,
            "ctx_k" => &mut self.ctx_k,
            "ctx_v" => &mut self.ctx_v,
            _ => return None,
        })
    }

    pub fn to_weights(&self, file: &mut WeightFile, prefix: &str) {
        for name in ["q", "k", "v", "o", "ctx_q", "ctx_k", "ctx_v", "cond_w"] {
            let m = self.matrix(name).expect("listed");
            file.insert(format!("{prefix}.{name}"), vec![m.nrows(), m.ncols()], &m.iter().copied().collect::<Vec<_>>());
        }
        file.insert(format!("{prefix}.cond_b"), vec![self.d], &self.cond_b.to_vec());
        file.insert(format!("{prefix}.gamma"), vec![1], &[self.gamma]);
        file.insert(format!("{prefix}.lambda"), vec![1], &[self.lambda]);
    }

    pub fn from_weights(file: &WeightFile, prefix: &str, d: usize, cond_dim: usize) -> Result<Self, WeightError> {
        let m = |name: &str, cols: usize| -> Result<Array2<f64>, WeightError> {
            let v = file.get(&format!("{prefix}.{name}"), &[d, cols])?;
            Ok(Array2::from_shape_vec((d, cols), v).expect("shape checked"))
        };
        Ok(AttentionParams {
            d,
            wq: m("q", d)?,
            wk: m("k", d)?,
            wv: m("v", d)?,
            wo: m("o", d)?,
            ctx_q: m("ctx_q", d)?,
            ctx_k: m("ctx_k", d)?,
            ctx_v: m("ctx_v", d)?,
            cond_w: m("cond_w", cond_dim)?,
            cond_b: Array1::from(file.get(&format!("{prefix}.cond_b"), &[d])?),
            gamma: file.get(&format!("{prefix}.gamma"), &[1])?[0],
            lambda: file.get(&format!("{prefix}.lambda"), &[1])?[0],
        })
    }
}

fn check_tokens(x: &Array2<f64>, d: usize, what: &str) -> Result<(), AttentionError> {
    if x.ncols() != d {
        return Err(AttentionError::ShapeMismatch(format!("{what} has width {}, model dim is {d}", x.ncols())));
    }
    Ok(())
}

/// In-place numerically stable softmax of every row.
fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q K^T / sqrt(d)) V W_O^T`.
pub fn self_attention(tokens: &Array2<f64>, p: &AttentionParams) -> Array2<f64> {
    let q = tokens.dot(&p.wq.t());
    let k = tokens.dot(&p.wk.t());
    let v = tokens.dot(&p.wv.t());
    let mut scores = q.dot(&k.t()) / (p.d as f64).sqrt();
    softmax_rows(&mut scores);
    scores.dot(&v).dot(&p.wo.t())
}

/// `v + beta * tanh(gamma) * TS(SelfAttn([v, bridge(cond)]))` where TS keeps
/// the first `T` output rows.
pub fn operation_self_attention(
    visual: &Array2<f64>,
    cond: &Array2<f64>,
    p: &AttentionParams,
    beta: f64,
) -> Result<Array2<f64>, AttentionError> {
    check_tokens(visual, p.d, "visual tokens")?;
    if cond.ncols() != p.cond_dim() {
        return Err(AttentionError::ShapeMismatch(format!(
            "condition tokens have width {}, bridge expects {}",
            cond.ncols(),
            p.cond_dim()
        )));
    }
    let gate = beta * p.gamma.tanh();
    if gate == 0.0 {
        return Ok(visual.clone());
    }
    let bridged = cond.dot(&p.cond_w.t()) + &p.cond_b;
    let joint = ndarray::concatenate(Axis(0), &[visual.view(), bridged.view()]).expect("widths match");
    let attended = self_attention(&joint, p);
    Ok(visual + &(attended.slice(s![..visual.nrows(), ..]).to_owned() * gate))
}

/// `A[i, j] = 0` iff `M_r[i]` and `M_{r-1}[j]` are both set, else `MASK_NEG`.
pub fn build_cross_round_mask(current: &Mask, previous: &Mask) -> Result<Array2<f64>, AttentionError> {
    if (current.height, current.width) != (previous.height, previous.width) {
        return Err(AttentionError::ShapeMismatch(format!(
            "masks are {}x{} and {}x{}",
            current.height, current.width, previous.height, previous.width
        )));
    }
    let n = current.len();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if current.cells[i] != 0 && previous.cells[j] != 0 {
            0.0
        } else {
            MASK_NEG
        }
    }))
}

/// `v_r + lambda * M_tgt * softmax(A + Q' K'^T / sqrt(d)) V'`, with `Q'` from
/// the current round and `K'`, `V'` from the previous one. Rows with no
/// allowed key contribute zero.
pub fn context_self_attention(
    current: &Array2<f64>,
    previous: &Array2<f64>,
    m_current: &Mask,
    m_previous: &Mask,
    m_target: &Mask,
    p: &AttentionParams,
) -> Result<Array2<f64>, AttentionError> {
    check_tokens(current, p.d, "current tokens")?;
    check_tokens(previous, p.d, "previous tokens")?;
    let t = current.nrows();
    if previous.nrows() != t || m_current.len() != t || m_previous.len() != t || m_target.len() != t {
        return Err(AttentionError::ShapeMismatch(format!(
            "token counts {t}/{} and mask sizes {}/{}/{} disagree",
            previous.nrows(),
            m_current.len(),
            m_previous.len(),
            m_target.len()
        )));
    }
    if p.lambda == 0.0 || m_target.is_all_zero() {
        return Ok(current.clone());
    }
    let a = build_cross_round_mask(m_current, m_previous)?;
    let q = current.dot(&p.ctx_q.t());
    let k = previous.dot(&p.ctx_k.t());
    let v = previous.dot(&p.ctx_v.t());
    let mut scores = a + &(q.dot(&k.t()) / (p.d as f64).sqrt());
    let any_key = !m_previous.is_all_zero();
    let mut out = current.clone();
    softmax_rows(&mut scores);
    for i in 0..t {
        if m_target.cells[i] == 0 || m_current.cells[i] == 0 || !any_key {
            continue;
        }
        let row = scores.row(i).dot(&v);
        out.row_mut(i).scaled_add(p.lambda, &row);
    }
    Ok(out)
}

/// Low-rank update `W + (alpha / r) B A` for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// Down projection, `rank x d_in`.
    pub a: Array2<f64>,
    /// Up projection, `d_out x rank`; zero when created.
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * (self.alpha / self.rank() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapterSet {
    pub domain: Domain,
    pub rank: usize,
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl LoraAdapterSet {
    /// Fresh adapters on every context projection: random `A`, zero `B`.
    pub fn new(domain: Domain, d: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self, AttentionError> {
        if rank == 0 {
            return Err(AttentionError::InvalidRank);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = LORA_TARGETS
            .iter()
            .map(|t| {
                (
                    t.to_string(),
                    LoraAdapter {
                        a: random_matrix(rank, d, &mut rng),
                        b: Array2::zeros((d, rank)),
                        alpha,
                    },
                )
            })
            .collect();
        Ok(LoraAdapterSet { domain, rank, adapters })
    }
}

/// Effective parameters with `adapters` merged in; `None` returns a copy of
/// the base.
pub fn apply_lora(params: &AttentionParams, adapters: Option<&LoraAdapterSet>) -> Result<AttentionParams, AttentionError> {
    let mut out = params.clone();
    let Some(set) = adapters else {
        return Ok(out);
    };
    for (name, ad) in &set.adapters {
        let w = out.matrix_mut(name).ok_or_else(|| AttentionError::UnknownTarget(name.clone()))?;
        if ad.rank() == 0 || ad.b.ncols() != ad.rank() {
            return Err(AttentionError::InvalidRank);
        }
        if ad.b.nrows() != w.nrows() || ad.a.ncols() != w.ncols() {
            return Err(AttentionError::ShapeMismatch(format!(
                "adapter `{name}` is {}x{} over a {}x{} weight",
                ad.b.nrows(),
                ad.a.ncols(),
                w.nrows(),
                w.ncols()
            )));
        }
        // a zero update leaves the weight bitwise intact
        if ad.b.iter().all(|v| *v == 0.0) || ad.a.iter().all(|v| *v == 0.0) {
            continue;
        }
        *w += &ad.delta();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Training,
    Inference,
}

/// One adapter set per data domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLoraBank {
    pub real: LoraAdapterSet,
    pub syn: LoraAdapterSet,
}

impl DomainLoraBank {
    pub fn new(d: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self, AttentionError> {
        Ok(DomainLoraBank {
            real: LoraAdapterSet::new(Domain::Real, d, rank, alpha, seed)?,
            syn: LoraAdapterSet::new(Domain::Syn, d, rank, alpha, seed.wrapping_add(1))?,
        })
    }

    /// Adapters for a training sample's domain; none at inference.
    pub fn select(&self, domain: Domain, stage: Stage) -> Option<&LoraAdapterSet> {
        match (stage, domain) {
            (Stage::Inference, _) => None,
            (Stage::Training, Domain::Real) => Some(&self.real),
            (Stage::Training, Domain::Syn) => Some(&self.syn),
        }
    }
}
