use std::cell::RefCell;
use std::path::Path;

use dmsl_core::model::DType;
use dmsl_core::dataset::{build_folds, subject_ids, DiskSource, Role, NUM_FOLDS};
use dmsl_core::model::{load_checkpoint, save_checkpoint, HeadKind, StackedModel};
use dmsl_core::training::{
    blackout, boundary_seed, checkpoint_meta, coord_set, fold_entries, landmark_seed, load_examples, mask_set,
    train_stage1, train_stage2, EpochLog, Example, Hyperparams,
};
use dmsl_core::{BoundaryBox, FaceImage};
use serde_json::{json, Value};

use super::{load_hp, load_manifest, print_json};
use crate::error::{CliError, CliResult};
use crate::out::{git_rev, OutDir};
use crate::{ModelSel, StageSel, TrainArgs};

/// CSV writer for per-epoch log rows.
pub struct EpochCsv(csv::Writer<std::fs::File>);

impl EpochCsv {
    pub fn create(path: &Path) -> CliResult<Self> {
        Ok(Self(csv::Writer::from_path(path)?))
    }

    pub fn write(&mut self, row: &EpochLog) {
        log::info!(
            "fold {:?} {} epoch {} train {:.6} val {:?}",
            row.fold,
            row.stage,
            row.epoch,
            row.train_loss,
            row.val_loss
        );
        if let Err(e) = self.0.serialize(row).and_then(|_| Ok(self.0.flush()?)) {
            log::error!("training log: {e}");
        }
    }
}

struct Split {
    train: Vec<Example>,
    val: Vec<Example>,
}

fn cut(model: Option<&StackedModel>, xs: &[Example]) -> CliResult<Vec<FaceImage>> {
    let boxes: Vec<BoundaryBox> = match model {
        Some(m) => {
            let refs: Vec<&FaceImage> = xs.iter().map(|e| &e.image).collect();
            let mut out = Vec::with_capacity(xs.len());
            for chunk in refs.chunks(32) {
                for v in m.predict_raw(chunk)? {
                    out.push(BoundaryBox::from_slice(&v)?.clamped());
                }
            }
            out
        }
        None => xs.iter().map(|e| e.boundary).collect(),
    };
    Ok(xs.iter().zip(&boxes).map(|(e, b)| blackout(&e.image, b)).collect())
}

fn summary_json(s: &dmsl_core::training::StageSummary) -> Value {
    json!({
        "epochs_run": s.epochs_run,
        "best_epoch": s.best_epoch,
        "final_train_loss": s.final_train_loss,
        "best_val_loss": s.best_val_loss,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_kind(
    out: &OutDir,
    kind: HeadKind,
    split: &Split,
    inputs: (&[FaceImage], &[FaceImage]),
    hp: &Hyperparams,
    fold: usize,
    stage: StageSel,
    from: &Path,
    log: &mut dyn FnMut(&EpochLog),
) -> CliResult<Value> {
    let seed = match kind {
        HeadKind::Boundary => boundary_seed(hp),
        HeadKind::Landmarks => landmark_seed(hp),
    };
    let mut report = json!({ "model": kind.as_str() });
    let rev = git_rev();
    let val_set = |f: &dyn Fn() -> dmsl_core::Result<dmsl_core::training::TensorSet>| {
        if split.val.is_empty() {
            Ok(None)
        } else {
            f().map(Some)
        }
    };

    let (model, stage1_digest) = if stage != StageSel::Two {
        let model = StackedModel::new(kind, hp.unet, hp.hidden, seed, DType::F32)?;
        let t = mask_set(kind, inputs.0, &split.train, DType::F32)?;
        let v = val_set(&|| mask_set(kind, inputs.1, &split.val, DType::F32))?;
        let s = train_stage1(&model.unet, &t, v.as_ref(), hp, &format!("{}/1", kind.as_str()), Some(fold), log)?;
        let meta = checkpoint_meta(&model, 1, Some(fold), s.best_epoch, hp.seed, rev.clone())?;
        let dir = out.subdir(Path::new("stage1").join(kind.as_str()))?;
        save_checkpoint(&dir.dir, &model, &meta)?;
        report["stage1"] = summary_json(&s);
        report["stage1_checkpoint"] = json!(dir.dir);
        (model, meta.unet_digest)
    } else {
        let dir = from.join(kind.as_str());
        let (model, meta) = load_checkpoint(&dir)?;
        if model.unet.digest()? != meta.unet_digest {
            return Err(CliError::Invalid(format!("{}: parameters do not match their digest", dir.display())));
        }
        (model, meta.unet_digest)
    };

    if stage != StageSel::One {
        let t = coord_set(kind, inputs.0, &split.train, DType::F32)?;
        let v = val_set(&|| coord_set(kind, inputs.1, &split.val, DType::F32))?;
        let s = train_stage2(&model, &t, v.as_ref(), hp, &format!("{}/2", kind.as_str()), Some(fold), log)?;
        let meta = checkpoint_meta(&model, 2, Some(fold), s.stage.best_epoch, hp.seed, rev)?;
        let dir = out.subdir(Path::new("checkpoints").join(kind.as_str()))?;
        save_checkpoint(&dir.dir, &model, &meta)?;
        report["stage2"] = summary_json(&s.stage);
        report["checkpoint"] = json!(dir.dir);
        report["unet_digest_stage1"] = json!(stage1_digest);
        report["unet_digest_stage2"] = json!(meta.unet_digest);
        report["unet_frozen"] = json!(meta.unet_digest == stage1_digest);
    }
    Ok(report)
}

pub fn train(out: &OutDir, args: &TrainArgs, seed: Option<u64>) -> CliResult<&'static str> {
    let mut hp = load_hp(args.hp.as_deref(), seed)?;
    hp.train_with_predicted_boxes |= args.train_with_predicted_boxes;
    if args.fold >= NUM_FOLDS {
        return Err(CliError::Invalid(format!("--fold must be below {NUM_FOLDS}")));
    }
    let (records, base) = load_manifest(&args.manifest)?;
    let plan = build_folds(&subject_ids(&records))?;
    let source = DiskSource::new(&base);
    let split = Split {
        train: load_examples(&records, &fold_entries(&records, &plan, args.fold, Role::Train), &source)?,
        val: load_examples(&records, &fold_entries(&records, &plan, args.fold, Role::Validation), &source)?,
    };
    if split.train.is_empty() {
        return Err(CliError::Invalid(format!("fold {}: no annotated training images", args.fold)));
    }
    let from = args.from.clone().unwrap_or_else(|| out.dir.join("stage1"));
    let log_file = RefCell::new(EpochCsv::create(&out.file("train_log.csv")?)?);
    let mut log = |row: &EpochLog| log_file.borrow_mut().write(row);

    let plain = |xs: &[Example]| xs.iter().map(|e| e.image.clone()).collect::<Vec<_>>();
    let mut reports = Vec::new();
    let mut boundary_model = None;
    if args.model != ModelSel::Landmark {
        let r = train_kind(
            out,
            HeadKind::Boundary,
            &split,
            (&plain(&split.train), &plain(&split.val)),
            &hp,
            args.fold,
            args.stage,
            &from,
            &mut log,
        )?;
        reports.push(r);
    }
    if args.model != ModelSel::Boundary {
        if hp.train_with_predicted_boxes {
            let dir = out.dir.join("checkpoints").join(HeadKind::Boundary.as_str());
            let (m, _) = load_checkpoint(&dir).map_err(|e| {
                CliError::Invalid(format!("predicted boxes need a trained boundary model in {}: {e}", dir.display()))
            })?;
            boundary_model = Some(m);
        }
        let train_in = cut(boundary_model.as_ref(), &split.train)?;
        let val_in = cut(boundary_model.as_ref(), &split.val)?;
        let r = train_kind(
            out,
            HeadKind::Landmarks,
            &split,
            (&train_in, &val_in),
            &hp,
            args.fold,
            args.stage,
            &from,
            &mut log,
        )?;
        reports.push(r);
    }
    let summary = json!({
        "fold": args.fold,
        "seed": hp.seed,
        "train_images": split.train.len(),
        "val_images": split.val.len(),
        "models": reports,
    });
    out.write_json("train_summary.json", &summary)?;
    print_json(&summary);
    Ok("train")
}
