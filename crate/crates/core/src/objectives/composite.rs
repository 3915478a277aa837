use super::{
    loss_asr, loss_cml, loss_erm, loss_mt_reg, loss_mtp, loss_st_ddm, loss_stm, loss_total, LossError, LossReport,
    LossWeights,
};
use crate::corpus::{Lang, Task, Vocab};
use crate::model::{ComSLModel, Forward};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Teacher-forced decoder input and aligned targets for one sequence.
///
/// The prefix is `[task, lang, t_1 .. t_n]`; row `i` of the logits predicts
/// `targets[i]`, so row 0 (predicting the language tag) is ignored and the
/// last row predicts EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderIo {
    pub prefix: Vec<usize>,
    pub targets: Vec<usize>,
    pub ignore: Vec<bool>,
}

impl DecoderIo {
    pub fn new(vocab: &Vocab, task: Task, src: Lang, seq: &[usize]) -> Self {
        let [tag, lang] = vocab.prefix(task, src);
        let mut prefix = vec![tag, lang];
        prefix.extend_from_slice(seq);
        let mut targets = vec![lang];
        targets.extend_from_slice(seq);
        targets.push(Vocab::EOS);
        let mut ignore = vec![false; targets.len()];
        ignore[0] = true;
        DecoderIo {
            prefix,
            targets,
            ignore,
        }
    }
}

/// One unpadded training example in the model's precision.
#[derive(Debug, Clone, Copy)]
pub struct ExampleInput<'a, T> {
    pub frames: &'a Tensor<T>,
    pub transcript: &'a [usize],
    pub translation: &'a [usize],
    pub masked: &'a [usize],
    pub mask_positions: &'a [usize],
    pub src: Lang,
}

/// Models consulted without gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct Teachers<'a, T> {
    /// Frozen pre-finetuned copy for MT regularization.
    pub frozen: Option<&'a ComSLModel<T>>,
}

fn value<T: Scalar>(fwd: &Forward<'_, T>, v: Var) -> f64 {
    fwd.tape.item(v).to_f64().unwrap_or(f64::NAN)
}

fn frozen_mt_logits<T: Scalar>(
    frozen: &ComSLModel<T>,
    transcript: &[usize],
    io: &DecoderIo,
) -> Result<Tensor<T>, LossError> {
    let mut f = frozen.eval();
    let z = f.encode_text(transcript)?;
    let logits = f.decode_logits(z.hidden, &io.prefix)?;
    Ok(f.tape.value(logits).clone())
}

/// Runs the text-only, speech-only and concatenated forwards that the enabled
/// losses need and returns the weighted total with every component.
pub fn example_losses<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    vocab: &Vocab,
    ex: &ExampleInput<'_, T>,
    w: &LossWeights,
    teachers: Teachers<'_, T>,
) -> Result<(Var, LossReport), LossError> {
    let mut report = LossReport::default();
    let asr_io = DecoderIo::new(vocab, Task::Asr, ex.src, ex.transcript);
    let st_io = DecoderIo::new(vocab, Task::St, ex.src, ex.translation);

    // Text-only branch: MT loss and the DDM teacher.
    let mut mt = None;
    let mut ddm_teacher = None;
    if w.needs_mt_forward() {
        let mt_io = DecoderIo::new(vocab, Task::Mt, ex.src, ex.translation);
        let z_x = fwd.encode_text(ex.transcript)?;
        let logits = fwd.decode_logits(z_x.hidden, &mt_io.prefix)?;
        if w.lambda_s > 0.0 {
            ddm_teacher = Some(fwd.tape.value(logits).clone());
        }
        if w.w_mt > 0.0 {
            let frozen = match teachers.frozen {
                Some(m) if w.lambda_t > 0.0 => Some(frozen_mt_logits(m, ex.transcript, &mt_io)?),
                _ => None,
            };
            let l = loss_mt_reg(
                &mut fwd.tape,
                logits,
                frozen.as_ref(),
                &mt_io.targets,
                &mt_io.ignore,
                w.lambda_t,
            )?;
            report.mt = value(fwd, l);
            mt = Some(l);
        }
    }

    // Speech-only branch.
    let need_speech = w.needs_speech_forward();
    let e_s = if need_speech || w.w_cml > 0.0 {
        Some(fwd.encode_speech(ex.frames)?)
    } else {
        None
    };
    let mut asr = None;
    let mut st = None;
    let mut speech_trace = None;
    if let (true, Some(e_s)) = (need_speech, e_s) {
        let z_s = fwd.encode_speech_memory(e_s)?;
        speech_trace = Some(z_s.layer_trace);
        if w.w_asr > 0.0 {
            let logits = fwd.decode_logits(z_s.hidden, &asr_io.prefix)?;
            let l = loss_asr(&mut fwd.tape, logits, &asr_io.targets, &asr_io.ignore)?;
            report.asr = value(fwd, l);
            asr = Some(l);
        }
        if w.w_st > 0.0 {
            let logits = fwd.decode_logits(z_s.hidden, &st_io.prefix)?;
            let l = loss_st_ddm(
                &mut fwd.tape,
                logits,
                ddm_teacher.as_ref(),
                &st_io.targets,
                &st_io.ignore,
                w.lambda_s,
            )?;
            report.st = value(fwd, l);
            st = Some(l);
        }
    }

    // Concatenated branch.
    let mut cml = None;
    if let (true, Some(e_s)) = (w.w_cml > 0.0, e_s) {
        let c = fwd.encode_concat(e_s, ex.masked)?;
        let mtp_logits = fwd.decode_logits(c.text, &asr_io.prefix)?;
        let rows: Vec<usize> = ex.mask_positions.iter().map(|&p| p + 1).collect();
        if let Some(&pos) = ex.mask_positions.iter().find(|&&p| p >= ex.transcript.len()) {
            return Err(LossError::MaskRange {
                pos,
                len: ex.transcript.len(),
            });
        }
        let mtp = loss_mtp(&mut fwd.tape, mtp_logits, &asr_io.targets, &rows)?;
        let src_logits = fwd.decode_logits(c.speech, &asr_io.prefix)?;
        let tgt_logits = fwd.decode_logits(c.speech, &st_io.prefix)?;
        let (stm_src, stm_tgt) = loss_stm(
            &mut fwd.tape,
            (src_logits, &asr_io.targets, &asr_io.ignore),
            (tgt_logits, &st_io.targets, &st_io.ignore),
        )?;
        let erm = match speech_trace {
            Some(a) if w.w_erm > 0.0 => loss_erm(&mut fwd.tape, c.speech_trace, a)?,
            _ => fwd.tape.constant(Tensor::scalar(T::zero())),
        };
        let l = loss_cml(&mut fwd.tape, stm_src, stm_tgt, mtp, erm, w.w_erm)?;
        report.mtp = value(fwd, mtp);
        report.stm_src = value(fwd, stm_src);
        report.stm_tgt = value(fwd, stm_tgt);
        report.erm = value(fwd, erm);
        report.cml = value(fwd, l);
        cml = Some(l);
    }

    let total = loss_total(&mut fwd.tape, [asr, st, mt, cml], w)?;
    report.total = value(fwd, total);
    if !report.total.is_finite() {
        return Err(LossError::NonFinite(report));
    }
    Ok((total, report))
}
