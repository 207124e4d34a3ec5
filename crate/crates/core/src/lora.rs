//! Per-stage low-rank adapters and their incremental merge rules.
//!
//! A projection `W` (shape `d × k`) is adapted as `W + ΔW`. Each stage `t`
//! owns one factor pair `A_t` (`d × r`) and `B_t` (`r × k`); earlier stages are
//! frozen in a [`LoraLedger`]. The default merge sums factors across stages
//! before multiplying, `(ΣA)(ΣB)`; the concatenated form `Σ A_i B_i` is kept
//! as an ablation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{push_floats, push_line, LineReader};
use crate::error::{Error, Result};
use crate::numkit::{gaussian_matrix, matmul, Matrix, RngStream};

pub const DEFAULT_INIT_STDDEV: f64 = 0.02;

const ADAPTER_MAGIC: &str = "fcil-adapter";
const LEDGER_MAGIC: &str = "fcil-ledger";
const FORMAT_VERSION: usize = 1;

/// How the stages of a ledger combine into one weight delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    /// `(Σ_i A_i)(Σ_i B_i)`.
    #[default]
    Sum,
    /// `Σ_i A_i B_i`, the block product of the concatenated factors.
    Concat,
    /// Only the active stage contributes; history is discarded. Ablation.
    ActiveOnly,
}

impl fmt::Display for LedgerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LedgerMode::Sum => "sum",
            LedgerMode::Concat => "concat",
            LedgerMode::ActiveOnly => "active_only",
        })
    }
}

impl FromStr for LedgerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(LedgerMode::Sum),
            "concat" => Ok(LedgerMode::Concat),
            "active_only" => Ok(LedgerMode::ActiveOnly),
            other => Err(Error::Config(format!(
                "ledger_mode: expected sum, concat or active_only, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub stage_id: usize,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraAdapter {
    /// Gaussian `A`, zero `B`: the fresh adapter contributes nothing.
    pub fn new(
        d: usize,
        k: usize,
        rank: usize,
        stage_id: usize,
        init_stddev: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::InvalidRank { rank, d, k });
        }
        Ok(Self {
            stage_id,
            a: gaussian_matrix(d, rank, 0.0, init_stddev, rng)?,
            b: Matrix::zeros(rank, k),
        })
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }

    pub fn k(&self) -> usize {
        self.b.cols()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d(), self.k(), self.rank())
    }

    pub fn delta(&self) -> Matrix {
        matmul(&self.a, &self.b).expect("adapter factors share the rank dimension")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_text(&mut out);
        out
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        push_line(out, ADAPTER_MAGIC, [format!("v{FORMAT_VERSION}")]);
        push_line(out, "stage_id", [self.stage_id.to_string()]);
        push_line(
            out,
            "shape",
            [self.d(), self.k(), self.rank()].map(|v| v.to_string()),
        );
        push_floats(out, "a", self.a.as_slice());
        push_floats(out, "b", self.b.as_slice());
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rd = LineReader::new(text, Path::new("<adapter>"));
        let adapter = Self::read(&mut rd)?;
        if !rd.at_end() {
            return Err(rd.error("trailing content after adapter record"));
        }
        Ok(adapter)
    }

    pub(crate) fn read(rd: &mut LineReader<'_>) -> Result<Self> {
        let v = rd.expect(ADAPTER_MAGIC)?;
        if v != [format!("v{FORMAT_VERSION}").as_str()] {
            return Err(rd.error(format!("unsupported adapter format {v:?}")));
        }
        let stage_id = rd.expect_usizes("stage_id", 1)?[0];
        let shape = rd.expect_usizes("shape", 3)?;
        let (d, k, r) = (shape[0], shape[1], shape[2]);
        if r == 0 || r > d.min(k) {
            return Err(rd.error(format!("invalid rank {r} for {d}x{k}")));
        }
        let a = rd.expect_matrix("a", d, r)?;
        let b = rd.expect_matrix("b", r, k)?;
        Ok(Self { stage_id, a, b })
    }
}

/// Frozen history plus the trainable adapter for one attachment point.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLedger {
    attachment: usize,
    frozen: Vec<LoraAdapter>,
    active: LoraAdapter,
}

impl LoraLedger {
    pub fn new(attachment: usize, active: LoraAdapter) -> Self {
        Self {
            attachment,
            frozen: Vec::new(),
            active,
        }
    }

    /// Assembles a ledger from parts, checking shapes and stage ordering.
    pub fn from_parts(
        attachment: usize,
        frozen: Vec<LoraAdapter>,
        active: LoraAdapter,
    ) -> Result<Self> {
        let dims = active.dims();
        let mut prev = 0;
        for ad in frozen.iter().chain(std::iter::once(&active)) {
            if ad.dims() != dims || ad.b.rows() != ad.rank() {
                return Err(Error::Shape {
                    op: "ledger stage",
                    left: (dims.0, dims.1),
                    right: (ad.d(), ad.k()),
                });
            }
            if ad.stage_id <= prev {
                return Err(Error::InvalidArgument(format!(
                    "ledger stage ids must increase strictly, found {} after {prev}",
                    ad.stage_id
                )));
            }
            prev = ad.stage_id;
        }
        Ok(Self {
            attachment,
            frozen,
            active,
        })
    }

    pub fn attachment(&self) -> usize {
        self.attachment
    }

    pub fn frozen(&self) -> &[LoraAdapter] {
        &self.frozen
    }

    pub fn active(&self) -> &LoraAdapter {
        &self.active
    }

    pub fn active_mut(&mut self) -> &mut LoraAdapter {
        &mut self.active
    }

    pub fn stage_count(&self) -> usize {
        self.frozen.len() + 1
    }

    pub fn stages(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.frozen.iter().chain(std::iter::once(&self.active))
    }

    pub fn frozen_a(&self) -> Vec<Matrix> {
        self.frozen.iter().map(|ad| ad.a.clone()).collect()
    }

    pub fn summed_a(&self) -> Matrix {
        let mut acc = Matrix::zeros(self.active.d(), self.active.rank());
        for ad in self.stages() {
            acc.add_assign(&ad.a).expect("ledger shapes validated");
        }
        acc
    }

    pub fn summed_b(&self) -> Matrix {
        let mut acc = Matrix::zeros(self.active.rank(), self.active.k());
        for ad in self.stages() {
            acc.add_assign(&ad.b).expect("ledger shapes validated");
        }
        acc
    }

    /// Freezes the active adapter and starts `next` as the new active stage.
    pub fn push_stage(&mut self, next: LoraAdapter) -> Result<()> {
        if next.dims() != self.active.dims() {
            return Err(Error::Shape {
                op: "push_stage",
                left: (self.active.d(), self.active.k()),
                right: (next.d(), next.k()),
            });
        }
        if next.stage_id <= self.active.stage_id {
            return Err(Error::InvalidArgument(format!(
                "next stage id {} must exceed {}",
                next.stage_id, self.active.stage_id
            )));
        }
        let prev = std::mem::replace(&mut self.active, next);
        self.frozen.push(prev);
        Ok(())
    }

    pub fn delta(&self, mode: LedgerMode) -> Matrix {
        match mode {
            LedgerMode::Sum => delta_sum(self),
            LedgerMode::Concat => delta_concat(self),
            LedgerMode::ActiveOnly => self.active.delta(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_text(&mut out);
        out
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        push_line(out, LEDGER_MAGIC, [format!("v{FORMAT_VERSION}")]);
        push_line(out, "attachment", [self.attachment.to_string()]);
        push_line(out, "stages", [self.stage_count().to_string()]);
        for ad in self.stages() {
            ad.write_text(out);
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rd = LineReader::new(text, Path::new("<ledger>"));
        let ledger = Self::read(&mut rd)?;
        if !rd.at_end() {
            return Err(rd.error("trailing content after ledger record"));
        }
        Ok(ledger)
    }

    pub(crate) fn read(rd: &mut LineReader<'_>) -> Result<Self> {
        let v = rd.expect(LEDGER_MAGIC)?;
        if v != [format!("v{FORMAT_VERSION}").as_str()] {
            return Err(rd.error(format!("unsupported ledger format {v:?}")));
        }
        let attachment = rd.expect_usizes("attachment", 1)?[0];
        let n = rd.expect_usizes("stages", 1)?[0];
        if n == 0 {
            return Err(rd.error("ledger needs at least one stage"));
        }
        let mut adapters = Vec::with_capacity(n);
        for _ in 0..n {
            adapters.push(LoraAdapter::read(rd)?);
        }
        let active = adapters.pop().expect("n >= 1");
        Self::from_parts(attachment, adapters, active).map_err(|e| rd.error(e.to_string()))
    }
}

/// `(Σ_i A_i)(Σ_i B_i)` over every stage in the ledger.
pub fn delta_sum(ledger: &LoraLedger) -> Matrix {
    matmul(&ledger.summed_a(), &ledger.summed_b()).expect("ledger shapes validated")
}

/// `[A_1 … A_t] · [B_1; …; B_t]`, materialized as concatenated factors.
pub fn delta_concat(ledger: &LoraLedger) -> Matrix {
    let (d, k, r) = ledger.active.dims();
    let t = ledger.stage_count();
    let mut a_cat = Matrix::zeros(d, r * t);
    let mut b_cat = Matrix::zeros(r * t, k);
    for (s, ad) in ledger.stages().enumerate() {
        for i in 0..d {
            for j in 0..r {
                a_cat[(i, s * r + j)] = ad.a[(i, j)];
            }
        }
        for i in 0..r {
            for j in 0..k {
                b_cat[(s * r + i, j)] = ad.b[(i, j)];
            }
        }
    }
    matmul(&a_cat, &b_cat).expect("concatenated factors agree")
}

fn check_gram_shapes(prev_a: &[Matrix], a_t: &Matrix) -> Result<()> {
    for p in prev_a {
        if p.shape() != a_t.shape() {
            return Err(Error::Shape {
                op: "ortho_reg",
                left: p.shape(),
                right: a_t.shape(),
            });
        }
    }
    Ok(())
}

/// `Σ_i ‖A_iᵀ A_t‖₁` (entrywise absolute sum of each Gram matrix).
pub fn ortho_reg(prev_a: &[Matrix], a_t: &Matrix) -> Result<f64> {
    check_gram_shapes(prev_a, a_t)?;
    let mut total = 0.0;
    for p in prev_a {
        total += matmul(&p.transpose(), a_t)?.abs_sum();
    }
    Ok(total)
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`ortho_reg`] in `a_t`: `Σ_i A_i · sign(A_iᵀ A_t)`, `sign(0) = 0`.
pub fn ortho_reg_grad(prev_a: &[Matrix], a_t: &Matrix) -> Result<Matrix> {
    check_gram_shapes(prev_a, a_t)?;
    let mut grad = Matrix::zeros(a_t.rows(), a_t.cols());
    for p in prev_a {
        let mut gram = matmul(&p.transpose(), a_t)?;
        for v in gram.as_mut_slice() {
            *v = sign0(*v);
        }
        grad.add_assign(&matmul(p, &gram)?)?;
    }
    Ok(grad)
}

/// Smallest `|A_iᵀ A_t|` entry over all Gram matrices; distance to an L1 kink.
pub fn min_gram_abs(prev_a: &[Matrix], a_t: &Matrix) -> Result<f64> {
    check_gram_shapes(prev_a, a_t)?;
    let mut m = f64::INFINITY;
    for p in prev_a {
        let gram = matmul(&p.transpose(), a_t)?;
        m = gram.as_slice().iter().fold(m, |acc, v| acc.min(v.abs()));
    }
    Ok(m)
}

fn flat_cosine(x: &Matrix, y: &Matrix) -> f64 {
    let dot: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
    let nx = x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    (dot / (nx * ny)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosinePair {
    pub stage_i: usize,
    pub stage_j: usize,
    pub abs_cosine: f64,
}

/// `|cos|` between flattened `A` factors for every stage pair `i < j`.
pub fn cosine_pairs(ledger: &LoraLedger) -> Vec<CosinePair> {
    let stages: Vec<&LoraAdapter> = ledger.stages().collect();
    let mut out = Vec::new();
    for i in 0..stages.len() {
        for j in i + 1..stages.len() {
            out.push(CosinePair {
                stage_i: stages[i].stage_id,
                stage_j: stages[j].stage_id,
                abs_cosine: flat_cosine(&stages[i].a, &stages[j].a).abs(),
            });
        }
    }
    out
}

/// Mean pairwise `|cos|` between stage `A` factors.
pub fn avg_cosine(ledger: &LoraLedger) -> Result<f64> {
    if ledger.stage_count() < 2 {
        return Err(Error::Diagnostic(
            "cosine similarity requires >= 2 stages".into(),
        ));
    }
    let pairs = cosine_pairs(ledger);
    Ok(pairs.iter().map(|p| p.abs_cosine).sum::<f64>() / pairs.len() as f64)
}
