//! Training losses and their weighted composition.
//!
//! Every loss is a per-token mean over the rows it covers. Teacher
//! distributions enter as plain tensors, so no gradient can reach them.

mod composite;

pub use composite::{example_losses, DecoderIo, ExampleInput, Teachers};

use std::fmt::Write as _;

use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::model::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss weights: {}", .0.join("; "))]
    InvalidWeights(Vec<String>),
    #[error("{0}: empty target")]
    EmptyTarget(&'static str),
    #[error("{what}: student has {student} rows, teacher {teacher}")]
    TeacherShape {
        what: &'static str,
        student: usize,
        teacher: usize,
    },
    #[error("mt regularization weight is positive but no frozen teacher was given")]
    MissingTeacher,
    #[error("mask position {pos} outside transcript of length {len}")]
    MaskRange { pos: usize, len: usize },
    #[error("non-finite total loss; components {0:?}")]
    NonFinite(LossReport),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w_asr: f64,
    pub w_st: f64,
    pub w_mt: f64,
    pub w_cml: f64,
    pub w_erm: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub p_mask: f64,
    /// Text-encoder block whose output the ERM loss compares (1-based).
    pub k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_asr: 0.35,
            w_st: 0.35,
            w_mt: 0.2,
            w_cml: 0.1,
            w_erm: 0.1,
            lambda_s: 0.8,
            lambda_t: 0.2,
            p_mask: 0.3,
            k: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let mut issues = Vec::new();
        for (name, w) in [
            ("w_asr", self.w_asr),
            ("w_st", self.w_st),
            ("w_mt", self.w_mt),
            ("w_cml", self.w_cml),
            ("w_erm", self.w_erm),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                issues.push(format!("{name} {w} must be a nonnegative number"));
            }
        }
        for (name, l) in [("lambda_s", self.lambda_s), ("lambda_t", self.lambda_t)] {
            if !(0.0..=1.0).contains(&l) {
                issues.push(format!("{name} {l} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.p_mask) {
            issues.push(format!("p_mask {} must lie in [0, 1)", self.p_mask));
        }
        if self.k == 0 {
            issues.push("k must be at least 1".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(LossError::InvalidWeights(issues))
        }
    }

    /// Only the ST task, weight 1, no distillation.
    pub fn st_only() -> Self {
        LossWeights {
            w_asr: 0.0,
            w_st: 1.0,
            w_mt: 0.0,
            w_cml: 0.0,
            w_erm: 0.0,
            lambda_s: 0.0,
            lambda_t: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn write_kv(&self, prefix: &str, out: &mut String) {
        for (k, v) in [
            ("w_asr", self.w_asr),
            ("w_st", self.w_st),
            ("w_mt", self.w_mt),
            ("w_cml", self.w_cml),
            ("w_erm", self.w_erm),
            ("lambda_s", self.lambda_s),
            ("lambda_t", self.lambda_t),
            ("p_mask", self.p_mask),
        ] {
            let _ = writeln!(out, "{prefix}{k} = {v}");
        }
        let _ = writeln!(out, "{prefix}k = {}", self.k);
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<(), KvError> {
        kv.take_parse(&format!("{prefix}w_asr"), &mut self.w_asr)?;
        kv.take_parse(&format!("{prefix}w_st"), &mut self.w_st)?;
        kv.take_parse(&format!("{prefix}w_mt"), &mut self.w_mt)?;
        kv.take_parse(&format!("{prefix}w_cml"), &mut self.w_cml)?;
        kv.take_parse(&format!("{prefix}w_erm"), &mut self.w_erm)?;
        kv.take_parse(&format!("{prefix}lambda_s"), &mut self.lambda_s)?;
        kv.take_parse(&format!("{prefix}lambda_t"), &mut self.lambda_t)?;
        kv.take_parse(&format!("{prefix}p_mask"), &mut self.p_mask)?;
        kv.take_parse(&format!("{prefix}k"), &mut self.k)?;
        Ok(())
    }

    pub(crate) fn needs_mt_forward(&self) -> bool {
        self.w_mt > 0.0 || (self.w_st > 0.0 && self.lambda_s > 0.0)
    }

    pub(crate) fn needs_speech_forward(&self) -> bool {
        self.w_asr > 0.0 || self.w_st > 0.0 || (self.w_cml > 0.0 && self.w_erm > 0.0)
    }
}

/// Scalar value of every loss component for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub asr: f64,
    pub st: f64,
    pub mt: f64,
    pub mtp: f64,
    pub stm_src: f64,
    pub stm_tgt: f64,
    pub erm: f64,
    pub cml: f64,
    pub total: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 9] = ["asr", "st", "mt", "mtp", "stm_src", "stm_tgt", "erm", "cml", "total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.asr,
            self.st,
            self.mt,
            self.mtp,
            self.stm_src,
            self.stm_tgt,
            self.erm,
            self.cml,
            self.total,
        ]
    }

    /// CML and total recomputed from the other components.
    pub fn recompose(&self, w: &LossWeights) -> (f64, f64) {
        let cml = cml_value(self.stm_src, self.stm_tgt, self.mtp, self.erm, w.w_erm);
        (cml, total_value(self.asr, self.st, self.mt, cml, w))
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Mean of several reports, component by component.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 9];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [asr, st, mt, mtp, stm_src, stm_tgt, erm, cml, total] = acc.map(|v| v / n);
        LossReport {
            asr,
            st,
            mt,
            mtp,
            stm_src,
            stm_tgt,
            erm,
            cml,
            total,
        }
    }
}

pub fn cml_value(stm_src: f64, stm_tgt: f64, mtp: f64, erm: f64, w_erm: f64) -> f64 {
    (stm_src + stm_tgt + mtp) / 3.0 + w_erm * erm
}

pub fn total_value(asr: f64, st: f64, mt: f64, cml: f64, w: &LossWeights) -> f64 {
    w.w_asr * asr + w.w_st * st + w.w_mt * mt + w.w_cml * cml
}

/// Row-wise softmax of a detached logits tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        crate::tensor::kernels::softmax_in_place(row);
    }
    out
}

fn kept_rows(ignore: &[bool], what: &'static str) -> Result<usize, LossError> {
    match ignore.iter().filter(|&&i| !i).count() {
        0 => Err(LossError::EmptyTarget(what)),
        n => Ok(n),
    }
}

fn mean_weights<T: Scalar>(ignore: &[bool], scale: f64, kept: usize) -> Vec<T> {
    let w = T::of(scale / kept as f64);
    ignore.iter().map(|&i| if i { T::zero() } else { w }).collect()
}

/// Mean NLL of the transcript given speech-only memory.
pub fn loss_asr<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var, LossError> {
    kept_rows(ignore, "asr")?;
    Ok(tape.cross_entropy_rows(logits, targets, ignore)?)
}

/// `(1−λ)·CE(target) + λ·soft-CE(teacher)` per token, averaged over kept rows.
fn distilled<T: Scalar>(
    tape: &mut Tape<T>,
    what: &'static str,
    student: Var,
    teacher: Option<&Tensor<T>>,
    targets: &[usize],
    ignore: &[bool],
    lambda: f64,
) -> Result<Var, LossError> {
    let kept = kept_rows(ignore, what)?;
    let hard = tape.weighted_nll(student, targets, &mean_weights(ignore, 1.0 - lambda, kept))?;
    let Some(teacher) = teacher.filter(|_| lambda > 0.0) else {
        return Ok(hard);
    };
    let rows = tape.shape(student)[0];
    if teacher.shape() != tape.shape(student) {
        return Err(LossError::TeacherShape {
            what,
            student: rows,
            teacher: teacher.shape().first().copied().unwrap_or(0),
        });
    }
    let soft = softmax_rows(teacher);
    let soft = tape.weighted_soft_nll(student, &soft, &mean_weights(ignore, lambda, kept))?;
    Ok(tape.add(hard, soft)?)
}

/// ST loss with decoder distribution matching against the (detached) MT
/// logits of the same model.
pub fn loss_st_ddm<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    teacher_logits: Option<&Tensor<T>>,
    targets: &[usize],
    ignore: &[bool],
    lambda_s: f64,
) -> Result<Var, LossError> {
    if lambda_s > 0.0 && teacher_logits.is_none() {
        return Err(LossError::TeacherShape {
            what: "st_ddm",
            student: tape.shape(student)[0],
            teacher: 0,
        });
    }
    distilled(tape, "st_ddm", student, teacher_logits, targets, ignore, lambda_s)
}

/// MT loss regularized toward the frozen pre-finetuned model's logits.
pub fn loss_mt_reg<T: Scalar>(
    tape: &mut Tape<T>,
    student: Var,
    frozen_logits: Option<&Tensor<T>>,
    targets: &[usize],
    ignore: &[bool],
    lambda_t: f64,
) -> Result<Var, LossError> {
    if lambda_t > 0.0 && frozen_logits.is_none() {
        return Err(LossError::MissingTeacher);
    }
    distilled(tape, "mt_reg", student, frozen_logits, targets, ignore, lambda_t)
}

/// Mean NLL over the rows listed in `masked_rows`; exactly 0 when none are.
pub fn loss_mtp<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    masked_rows: &[usize],
) -> Result<Var, LossError> {
    let rows = tape.shape(logits)[0];
    if let Some(&pos) = masked_rows.iter().find(|&&r| r >= rows) {
        return Err(LossError::MaskRange { pos, len: rows });
    }
    if masked_rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut ignore = vec![true; rows];
    for &r in masked_rows {
        ignore[r] = false;
    }
    Ok(tape.cross_entropy_rows(logits, targets, &ignore)?)
}

/// Transcript and translation NLL from the speech half of the concatenated
/// encoding.
pub fn loss_stm<T: Scalar>(
    tape: &mut Tape<T>,
    src: (Var, &[usize], &[bool]),
    tgt: (Var, &[usize], &[bool]),
) -> Result<(Var, Var), LossError> {
    kept_rows(src.2, "stm_src")?;
    kept_rows(tgt.2, "stm_tgt")?;
    let a = tape.cross_entropy_rows(src.0, src.1, src.2)?;
    let b = tape.cross_entropy_rows(tgt.0, tgt.1, tgt.2)?;
    Ok((a, b))
}

/// MSE between the speech-only trace and the detached concatenated trace.
pub fn loss_erm<T: Scalar>(tape: &mut Tape<T>, concat_trace: Var, speech_trace: Var) -> Result<Var, LossError> {
    let target = tape.detach(concat_trace);
    Ok(tape.mse(speech_trace, target)?)
}

pub fn loss_cml<T: Scalar>(
    tape: &mut Tape<T>,
    stm_src: Var,
    stm_tgt: Var,
    mtp: Var,
    erm: Var,
    w_erm: f64,
) -> Result<Var, LossError> {
    let dec = tape.add(stm_src, stm_tgt)?;
    let dec = tape.add(dec, mtp)?;
    let dec = tape.scale(dec, T::of(1.0 / 3.0));
    let enc = tape.scale(erm, T::of(w_erm));
    Ok(tape.add(dec, enc)?)
}

/// Weighted sum of the enabled task losses; `None` contributes 0.
pub fn loss_total<T: Scalar>(
    tape: &mut Tape<T>,
    parts: [Option<Var>; 4],
    w: &LossWeights,
) -> Result<Var, LossError> {
    let weights = [w.w_asr, w.w_st, w.w_mt, w.w_cml];
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for (part, weight) in parts.into_iter().zip(weights) {
        if let Some(v) = part {
            let s = tape.scale(v, T::of(weight));
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}
