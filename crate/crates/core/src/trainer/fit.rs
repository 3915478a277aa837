use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_checkpoint, TrainConfig, TrainError, TrainState};
use crate::corpus::{collate_batch, Batch, Task, TripletExample, Vocab};
use crate::decode::evaluate;
use crate::model::{ComSLModel, ParamGroup};
use crate::objectives::{example_losses, DecoderIo, ExampleInput, LossError, LossReport, LossWeights, Teachers};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const DIVERGENCE: f64 = 1e4;

/// Deterministic train/validation split, stratified by source language.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<TripletExample>,
    pub val: Vec<TripletExample>,
}

pub fn split_corpus(corpus: &[TripletExample], val_fraction: f64, seed: u64) -> Splits {
    let mut langs: Vec<_> = corpus.iter().map(|e| e.src_lang).collect();
    langs.sort();
    langs.dedup();
    let mut is_val = vec![false; corpus.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b1_17);
    for lang in langs {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].src_lang == lang).collect();
        idx.shuffle(&mut rng);
        let n_val = (val_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_val.min(idx.len())] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (ex, v) in corpus.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(ex.clone());
    }
    Splits { train, val }
}

/// Example order for a whole run: each epoch is a fresh seeded permutation.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.n) {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.epoch));
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    /// Advances past `steps` batches without using them.
    fn skip(&mut self, steps: usize, size: usize) {
        for _ in 0..steps {
            self.next_batch(size);
        }
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64)
}

/// Forward, backward and gradient accumulation for every example of the
/// batch; the batch loss is the mean of the per-example losses.
fn accumulate_batch<T: Scalar>(
    model: &mut ComSLModel<T>,
    batch: &Batch,
    vocab: &Vocab,
    weights: &LossWeights,
    teacher: Option<&ComSLModel<T>>,
    dropout_seed: u64,
) -> Result<LossReport, LossError> {
    model.params_mut().zero_grads();
    let scale = T::of(1.0 / batch.len() as f64);
    let mut reports = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let frames: Tensor<T> = batch.frames_of(i).cast();
        let input = ExampleInput {
            frames: &frames,
            transcript: batch.transcript(i),
            translation: batch.translation(i),
            masked: batch.masked_transcript(i),
            mask_positions: &batch.mask_positions[i],
            src: batch.src_langs[i],
        };
        let grads = {
            let mut fwd = model.train_forward(Some(dropout_seed.wrapping_add(i as u64)));
            let (total, report) = example_losses(&mut fwd, vocab, &input, weights, Teachers { frozen: teacher })?;
            reports.push(report);
            let scaled = fwd.tape.scale(total, scale);
            fwd.backward(scaled)?
        };
        model.params_mut().accumulate(&grads);
    }
    Ok(LossReport::mean(&reports))
}

/// One optimizer step on `batch` at `state.step`, honoring the freeze window.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    model: &mut ComSLModel<T>,
    batch: &Batch,
    vocab: &Vocab,
    cfg: &TrainConfig,
    teacher: Option<&ComSLModel<T>>,
) -> Result<LossReport, TrainError> {
    let report = match accumulate_batch(model, batch, vocab, &cfg.weights, teacher, step_seed(state.seed, state.step)) {
        Ok(r) => r,
        Err(LossError::NonFinite(report)) => {
            return Err(TrainError::Diverged {
                step: state.step,
                report,
                last_good: state.best_path.clone(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    if !report.is_finite() || report.total > DIVERGENCE {
        return Err(TrainError::Diverged {
            step: state.step,
            report,
            last_good: state.best_path.clone(),
        });
    }
    let frozen = state.step < cfg.freeze_steps();
    state
        .opt
        .step(model.params_mut(), cfg.lr(state.step), |g| !(frozen && g == ParamGroup::Speech));
    state.step += 1;
    Ok(report)
}

/// Fine-tunes only the text encoder, decoder and embeddings on transcript →
/// translation pairs and returns a frozen copy of the result.
pub fn pre_finetune_mt<T: Scalar>(
    model: &mut ComSLModel<T>,
    corpus: &[TripletExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<ComSLModel<T>, TrainError> {
    let labeled: Vec<&TripletExample> = corpus.iter().filter(|e| !e.translation.is_empty()).collect();
    if labeled.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let weights = LossWeights {
        w_asr: 0.0,
        w_st: 0.0,
        w_mt: 1.0,
        w_cml: 0.0,
        w_erm: 0.0,
        lambda_s: 0.0,
        lambda_t: 0.0,
        ..cfg.weights.clone()
    };
    let mut opt = super::AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut sampler = Sampler::new(labeled.len(), cfg.seed ^ 0x6d74);
    for step in 0..cfg.mt_steps {
        let picks: Vec<&TripletExample> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| labeled[i]).collect();
        let batch = collate_batch(&picks, vocab, 0.0, 0)?;
        let seed = step_seed(cfg.seed ^ 0x6d74, step);
        let report = accumulate_batch(model, &batch, vocab, &weights, None, seed)?;
        if !report.is_finite() || report.total > DIVERGENCE {
            return Err(TrainError::Diverged {
                step,
                report,
                last_good: None,
            });
        }
        let lr = super::lr_at(step, cfg.mt_lr, cfg.mt_warmup, cfg.mt_steps);
        opt.step(model.params_mut(), lr, ParamGroup::is_text);
    }
    Ok(model.clone())
}

/// Mean teacher-forced MT cross-entropy (dropout off).
pub fn mt_validation_loss<T: Scalar>(
    model: &ComSLModel<T>,
    examples: &[TripletExample],
    vocab: &Vocab,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for ex in examples {
        let io = DecoderIo::new(vocab, Task::Mt, ex.src_lang, &ex.translation);
        let mut f = model.eval();
        let z = f.encode_text(&ex.transcript)?;
        let logits = f.decode_logits(z.hidden, &io.prefix)?;
        let l = f
            .tape
            .cross_entropy_rows(logits, &io.targets, &io.ignore)
            .map_err(LossError::from)?;
        sum += f.tape.item(l).to_f64().unwrap_or(f64::NAN);
    }
    Ok(sum / examples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
    pub bleu: Option<f64>,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("step={} lr={:e}", self.step, self.lr);
        for (k, v) in LossReport::FIELDS.iter().zip(self.report.values()) {
            let _ = write!(s, " {k}={v:.6}");
        }
        if let Some(b) = self.bleu {
            let _ = write!(s, " bleu={b:.4}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best_checkpoint: PathBuf,
    pub best_bleu: f64,
    pub log: Vec<LogRecord>,
}

/// Full training run. Validation BLEU (beam search) is measured every
/// `validation_every` steps and at the end; the best model is saved as
/// `out_dir/best.ckpt` and every step is appended to `out_dir/metrics.log`.
/// On return the live model holds the final (not necessarily best) weights.
pub fn fit<T: Scalar>(
    model: &mut ComSLModel<T>,
    splits: &Splits,
    vocab: &Vocab,
    cfg: &TrainConfig,
    teacher: Option<&ComSLModel<T>>,
    out_dir: &Path,
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let log_path = out_dir.join("metrics.log");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io(&log_path))?);
    let best_path = out_dir.join("best.ckpt");

    let val_end = if cfg.val_limit == 0 {
        splits.val.len()
    } else {
        cfg.val_limit.min(splits.val.len())
    };
    let val = &splits.val[..val_end];
    let mut state = TrainState::new(model, cfg);
    let mut sampler = Sampler::new(splits.train.len(), cfg.seed);
    sampler.skip(state.step, cfg.batch_size);
    let mut log = Vec::new();
    while state.step < cfg.total_steps {
        let step = state.step;
        let picks: Vec<&TripletExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &splits.train[i])
            .collect();
        let batch = collate_batch(&picks, vocab, cfg.weights.p_mask, step_seed(cfg.seed ^ 0x6d61736b, step))?;
        let lr = cfg.lr(step);
        let report = train_step(&mut state, model, &batch, vocab, cfg, teacher)?;
        let mut record = LogRecord {
            step,
            lr,
            report,
            bleu: None,
        };
        if (step + 1) % cfg.validation_every == 0 || step + 1 == cfg.total_steps {
            let bleu = evaluate(model, vocab, val, cfg.beam, false)?.st_bleu;
            record.bleu = Some(bleu);
            if state.best_bleu.is_none_or(|b| bleu > b) {
                state.best_bleu = Some(bleu);
                state.best_path = Some(best_path.clone());
                save_checkpoint(model, Some(&state), &best_path)?;
            }
        }
        writeln!(log_file, "{}", record.to_line()).map_err(io(&log_path))?;
        log.push(record);
    }
    log_file.flush().map_err(io(&log_path))?;
    Ok(FitOutcome {
        best_checkpoint: best_path,
        best_bleu: state.best_bleu.unwrap_or(0.0),
        log,
    })
}
