use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::beam::{evaluate, ModelTranslator};
use crate::corpus::{pseudo_label, Lang, TripletExample, Vocab};
use crate::model::{ComSLModel, ModelConfig};
use crate::objectives::LossWeights;
use crate::scalar::Scalar;
use crate::trainer::{fit, load_checkpoint, pre_finetune_mt, Splits, TrainConfig, TrainError};

/// Cumulative rungs of the training-strategy ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationStage {
    StOnly,
    PlusMt,
    PlusDdm,
    PlusAsr,
    PlusFreeze,
    PlusMtReg,
    PlusCml,
    PlusPseudo,
}

impl AblationStage {
    pub const LADDER: [AblationStage; 8] = [
        AblationStage::StOnly,
        AblationStage::PlusMt,
        AblationStage::PlusDdm,
        AblationStage::PlusAsr,
        AblationStage::PlusFreeze,
        AblationStage::PlusMtReg,
        AblationStage::PlusCml,
        AblationStage::PlusPseudo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationStage::StOnly => "st-only",
            AblationStage::PlusMt => "+mt",
            AblationStage::PlusDdm => "+ddm",
            AblationStage::PlusAsr => "+asr",
            AblationStage::PlusFreeze => "+freeze",
            AblationStage::PlusMtReg => "+mt-reg",
            AblationStage::PlusCml => "+cml",
            AblationStage::PlusPseudo => "+pseudo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::LADDER.into_iter().find(|st| st.name() == s)
    }

    /// Training config for this rung: every earlier feature enabled, with
    /// task weights taken from `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let b = &base.weights;
        let on = |s: AblationStage| self >= s;
        let weights = LossWeights {
            w_st: b.w_st,
            w_mt: if on(AblationStage::PlusMt) { b.w_mt } else { 0.0 },
            lambda_s: if on(AblationStage::PlusDdm) { b.lambda_s } else { 0.0 },
            w_asr: if on(AblationStage::PlusAsr) { b.w_asr } else { 0.0 },
            lambda_t: if on(AblationStage::PlusMtReg) { b.lambda_t } else { 0.0 },
            w_cml: if on(AblationStage::PlusCml) { b.w_cml } else { 0.0 },
            w_erm: if on(AblationStage::PlusCml) { b.w_erm } else { 0.0 },
            ..b.clone()
        };
        TrainConfig {
            weights,
            freeze_fraction: if on(AblationStage::PlusFreeze) {
                base.freeze_fraction
            } else {
                0.0
            },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub stage: AblationStage,
    pub seed: u64,
    pub st_bleu: f64,
    pub mt_bleu: f64,
    /// ST BLEU restricted to the designated low-resource languages.
    pub low_resource_bleu: f64,
    /// Set when training diverged; the BLEU fields are then NaN.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationSummary {
    fn column(&self, stage: AblationStage, f: impl Fn(&AblationRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage == stage).map(f).collect()
    }

    pub fn stages(&self) -> Vec<AblationStage> {
        let mut s: Vec<_> = self.rows.iter().map(|r| r.stage).collect();
        s.dedup();
        s
    }

    pub fn mean_st(&self, stage: AblationStage) -> f64 {
        let v = self.column(stage, |r| r.st_bleu);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn median_st(&self, stage: AblationStage) -> f64 {
        median(self.column(stage, |r| r.st_bleu))
    }

    pub fn median_low_resource(&self, stage: AblationStage) -> f64 {
        median(self.column(stage, |r| r.low_resource_bleu))
    }

    /// One line per run: stage, seed, ST BLEU, MT BLEU, low-resource ST BLEU.
    pub fn records_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                r.stage.name(),
                r.seed,
                r.st_bleu,
                r.mt_bleu,
                r.low_resource_bleu
            );
            if let Some(f) = &r.failure {
                let _ = write!(out, "\tfailed: {f}");
            }
            out.push('\n');
        }
        out
    }

    /// Per-stage mean and per-seed ST BLEU plus the delta to the previous stage.
    pub fn table_text(&self) -> String {
        let mut out = String::from("stage\tmean_st\tmedian_st\tdelta\tper_seed\n");
        let mut prev: Option<f64> = None;
        for stage in self.stages() {
            let mean = self.mean_st(stage);
            let seeds: Vec<String> = self.column(stage, |r| r.st_bleu).iter().map(|b| format!("{b:.2}")).collect();
            let delta = prev.map_or(String::from("-"), |p| format!("{:+.2}", mean - p));
            let _ = writeln!(
                out,
                "{}\t{mean:.2}\t{:.2}\t{delta}\t{}",
                stage.name(),
                self.median_st(stage),
                seeds.join(",")
            );
            prev = Some(mean);
        }
        out
    }
}

/// Inputs shared by every run of the ladder.
pub struct AblationSetup<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub vocab: &'a Vocab,
    pub splits: &'a Splits,
    /// Unlabeled speech/transcript pairs for the pseudo-data rung.
    pub pool: &'a [TripletExample],
    pub low_resource: &'a [Lang],
    pub out_dir: &'a Path,
}

fn run_one<T: Scalar>(
    setup: &AblationSetup<'_>,
    stage: AblationStage,
    seed: u64,
    start: &ComSLModel<T>,
    teacher: &ComSLModel<T>,
    pseudo: &[TripletExample],
) -> Result<AblationRow, TrainError> {
    let cfg = TrainConfig {
        seed,
        ..stage.configure(setup.train)
    };
    let splits;
    let splits_ref = if stage >= AblationStage::PlusPseudo {
        let mut train = setup.splits.train.clone();
        train.extend_from_slice(pseudo);
        splits = Splits {
            train,
            val: setup.splits.val.clone(),
        };
        &splits
    } else {
        setup.splits
    };
    let dir = setup.out_dir.join(format!("{}-seed{seed}", stage.name()));
    let mut model = start.clone();
    let outcome = fit(&mut model, splits_ref, setup.vocab, &cfg, Some(teacher), &dir)?;
    let (best, _) = load_checkpoint::<T>(&outcome.best_checkpoint)?;
    let report = evaluate(&best, setup.vocab, &setup.splits.val, cfg.beam, true)?;
    let low: Vec<TripletExample> = setup
        .splits
        .val
        .iter()
        .filter(|e| setup.low_resource.contains(&e.src_lang))
        .cloned()
        .collect();
    let low_bleu = if low.is_empty() {
        f64::NAN
    } else {
        evaluate(&best, setup.vocab, &low, cfg.beam, false)?.st_bleu
    };
    Ok(AblationRow {
        stage,
        seed,
        st_bleu: report.st_bleu,
        mt_bleu: report.mt_bleu,
        low_resource_bleu: low_bleu,
        failure: None,
    })
}

/// Trains one model per (stage, seed). Every run starts from the same
/// MT-pre-finetuned initialization for its seed. Divergence is recorded in
/// the row instead of aborting the suite.
pub fn ablation_suite<T: Scalar>(
    setup: &AblationSetup<'_>,
    stages: &[AblationStage],
    seeds: &[u64],
) -> Result<AblationSummary, TrainError> {
    if seeds.is_empty() || stages.is_empty() {
        return Err(TrainError::InvalidConfig(vec!["ablation needs at least one stage and one seed".into()]));
    }
    let mut starts: BTreeMap<u64, (ComSLModel<T>, ComSLModel<T>, Vec<TripletExample>)> = BTreeMap::new();
    for &seed in seeds {
        let mut model = ComSLModel::<T>::init(setup.model, seed)?;
        let cfg = TrainConfig {
            seed,
            ..setup.train.clone()
        };
        let teacher = pre_finetune_mt(&mut model, &setup.splits.train, setup.vocab, &cfg)?;
        let pseudo = if stages.contains(&AblationStage::PlusPseudo) {
            let pool: Vec<TripletExample> = setup
                .pool
                .iter()
                .filter(|e| setup.low_resource.contains(&e.src_lang))
                .cloned()
                .collect();
            let translator = ModelTranslator {
                model: &teacher,
                vocab: setup.vocab,
                beam: setup.train.beam,
            };
            let mut existing = setup.splits.train.clone();
            existing.extend_from_slice(&setup.splits.val);
            pseudo_label(&pool, &translator, &existing)?.examples
        } else {
            Vec::new()
        };
        starts.insert(seed, (model, teacher, pseudo));
    }
    let mut rows = Vec::new();
    for &stage in stages {
        for &seed in seeds {
            let (start, teacher, pseudo) = &starts[&seed];
            let row = match run_one(setup, stage, seed, start, teacher, pseudo) {
                Ok(r) => r,
                Err(e @ TrainError::Diverged { .. }) => AblationRow {
                    stage,
                    seed,
                    st_bleu: f64::NAN,
                    mt_bleu: f64::NAN,
                    low_resource_bleu: f64::NAN,
                    failure: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
    }
    Ok(AblationSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_are_cumulative() {
        let base = TrainConfig::default();
        let st = AblationStage::StOnly.configure(&base);
        assert_eq!(
            (st.weights.w_mt, st.weights.w_asr, st.weights.w_cml, st.weights.lambda_s, st.weights.lambda_t),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(st.freeze_fraction, 0.0);
        let ddm = AblationStage::PlusDdm.configure(&base);
        assert_eq!((ddm.weights.w_mt, ddm.weights.lambda_s, ddm.weights.w_asr), (0.2, 0.8, 0.0));
        let full = AblationStage::PlusPseudo.configure(&base);
        assert_eq!(full.weights, base.weights);
        assert_eq!(full.freeze_fraction, base.freeze_fraction);
        for s in AblationStage::LADDER {
            assert_eq!(AblationStage::parse(s.name()), Some(s));
        }
    }

    #[test]
    fn summary_statistics() {
        let row = |stage, seed, b| AblationRow {
            stage,
            seed,
            st_bleu: b,
            mt_bleu: 0.0,
            low_resource_bleu: b,
            failure: None,
        };
        let s = AblationSummary {
            rows: vec![
                row(AblationStage::StOnly, 1, 10.0),
                row(AblationStage::StOnly, 2, 30.0),
                row(AblationStage::StOnly, 3, 20.0),
                row(AblationStage::PlusMt, 1, 40.0),
            ],
        };
        assert_eq!(s.median_st(AblationStage::StOnly), 20.0);
        assert_eq!(s.mean_st(AblationStage::StOnly), 20.0);
        assert_eq!(s.records_text().lines().count(), 4);
        assert!(s.table_text().contains("+20.00"));
    }
}
