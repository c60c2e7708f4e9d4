//! The experiments behind each CLI subcommand. Every command writes
//! `config-echo.txt` plus its own artifacts into one output directory.

use std::collections::hash_map::DefaultHasher;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Injection, RunConfig};
use crate::data::{load_images, synth_dataset, write_pnm, ChannelStats, Dataset};
use crate::error::{config_err, contract_err, Error, Result};
use crate::eval::{finetune, linear_probe, write_eval_csv, EvalRow, FinetuneState};
use crate::masking::{largest_component, MaskPlan};
use crate::model::{BootMae, Tap};
use crate::nn::LN_EPS;
use crate::params::ParamSet;
use crate::tensor::{Graph, Tensor};
use crate::train::{append_metrics, pretrain_epoch, MaskStrategy, StepMetrics, TargetKind, TrainState, METRICS_HEADER};

/// Output directory with clobber protection for the entries a command owns.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Creates `root`. Existing owned entries are an error unless
    /// `overwrite` is set, in which case they are removed first.
    pub fn prepare(root: &Path, owned: &[&str], overwrite: bool) -> Result<Self> {
        let clash: Vec<&str> = owned.iter().copied().filter(|o| root.join(o).exists()).collect();
        if !clash.is_empty() {
            if !overwrite {
                return Err(config_err!(
                    "{} already holds {}; pass --overwrite to replace them",
                    root.display(),
                    clash.join(", ")
                ));
            }
            for c in clash {
                let p = root.join(c);
                let res = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
                res.map_err(|e| Error::io(&p, e))?;
            }
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Train and held-out splits, standardized with training statistics.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset, ChannelStats)> {
    let all = if cfg.dataset == "synth" {
        synth_dataset(&cfg.synth_spec(), cfg.data_seed)?
    } else {
        let ds = load_images(Path::new(&cfg.dataset), false)?;
        let want = [cfg.image_size, cfg.image_size, cfg.channels];
        if ds.extents() != Some(&want[..]) {
            return Err(config_err!(
                "images in {} are {:?}, the model expects {want:?}",
                cfg.dataset,
                ds.extents().unwrap_or_default()
            ));
        }
        ds
    };
    let (mut train, mut test) = all.split(cfg.train_split, cfg.data_seed);
    if train.is_empty() {
        return Err(config_err!("train_split {} leaves no training images", cfg.train_split));
    }
    let stats = train.channel_stats();
    train.apply_stats(&stats);
    test.apply_stats(&stats);
    Ok((train, test, stats))
}

fn open_metrics(path: &Path, keep: &[String]) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    for line in keep {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Lines of an existing CSV whose first field is below `limit`.
fn rows_before(path: &Path, limit: u64) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|v| v < limit))
        .map(str::to_string)
        .collect()
}

fn to_unit(img: &Tensor<f32>, stats: &ChannelStats) -> Tensor<f32> {
    let c = stats.mean.len();
    Tensor::from_fn(img.shape().to_vec(), |i| {
        (img.data()[i] as f64 * stats.std[i % c] + stats.mean[i % c]) as f32
    })
}

/// `[input | masked | reconstruction]` with one-pixel white separators.
/// Masked patches are filled with the regressor output, mapped back with
/// each patch's own mean and spread.
pub fn gallery_image(
    model: &BootMae<f32>,
    params: &ParamSet<f32>,
    image: &Tensor<f32>,
    plan: &MaskPlan,
    stats: &ChannelStats,
) -> Result<Tensor<f32>> {
    let grid = *model.grid();
    let patches = grid.patchify(image)?;
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let x_bar = model.forward_patches(&bound, &g, &patches, plan)?.x_bar.value();
    let width = grid.patch_dim();
    let mut masked = patches.clone();
    let mut recon = patches.clone();
    for &i in plan.masked() {
        let row = patches.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / width as f64;
        let scale = (var + LN_EPS).sqrt();
        for j in 0..width {
            masked.data_mut()[i * width + j] = 0.0;
            recon.data_mut()[i * width + j] = (x_bar.data()[i * width + j] as f64 * scale + mean) as f32;
        }
    }
    let panels: Vec<Tensor<f32>> = [patches, masked, recon]
        .iter()
        .map(|p| grid.unpatchify(p).map(|t| to_unit(&t, stats)))
        .collect::<Result<_>>()?;
    let (h, w, c) = (grid.h, grid.w, grid.c);
    let full_w = 3 * w + 2;
    Ok(Tensor::from_fn(vec![h, full_w, c], |i| {
        let (y, x, ch) = (i / (full_w * c), (i / c) % full_w, i % c);
        let (panel, px) = (x / (w + 1), x % (w + 1));
        if px == w {
            1.0
        } else {
            panels[panel].data()[(y * w + px) * c + ch]
        }
    }))
}

fn pnm_name(stem: &str, channels: usize) -> String {
    format!("{stem}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

/// Mean losses over an epoch's steps.
fn epoch_means(rows: &[StepMetrics]) -> (f64, f64, f64) {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&StepMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    (sum(|r| r.loss.l_r), sum(|r| r.loss.l_p), sum(|r| r.loss.total))
}

pub struct PretrainSummary {
    pub epochs: u64,
    pub final_losses: (f64, f64, f64),
    pub checkpoint: PathBuf,
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let resuming = !cfg.resume.is_empty();
    let owned = ["config-echo.txt", "metrics.csv", "checkpoints", "gallery"];
    let dir = OutDir::prepare(out, if resuming { &[] } else { &owned }, overwrite)?;
    dir.write("config-echo.txt", &cfg.echo())?;
    let (train, _, stats) = load_data(cfg)?;
    let model = BootMae::<f32>::new(cfg.model_config())?;
    let pcfg = cfg.pretrain_config();

    let mut state = if resuming {
        let ck = Checkpoint::load(Path::new(&cfg.resume))?;
        check_shapes(cfg, &ck)?;
        TrainState::from_checkpoint(&ck, &model)?
    } else {
        TrainState::new(&model, cfg.seed)
    };
    let metrics_path = dir.path("metrics.csv");
    let keep = if resuming { rows_before(&metrics_path, state.step) } else { Vec::new() };
    let mut metrics = open_metrics(&metrics_path, &keep)?;
    let ckpt_dir = dir.subdir("checkpoints")?;
    let config_text = cfg.echo();
    let mut last = (f64::NAN, f64::NAN, f64::NAN);

    while (state.epoch as usize) < cfg.epochs {
        let rows = match pretrain_epoch(&model, &train.images, &mut state, &pcfg) {
            Ok(r) => r,
            Err(e) => {
                metrics.flush().map_err(|io| Error::io(&metrics_path, io))?;
                let _ = state.to_checkpoint(&config_text).save(&ckpt_dir.join("failure.ckpt"));
                return Err(e);
            }
        };
        append_metrics(&mut metrics, &rows).map_err(|e| Error::io(&metrics_path, e))?;
        last = epoch_means(&rows);
        eprintln!(
            "epoch {}/{}  L_R {:.4}  L_P {:.4}  L {:.4}",
            state.epoch, cfg.epochs, last.0, last.1, last.2
        );
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every as u64 == 0 {
            state
                .to_checkpoint(&config_text)
                .save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", state.epoch)))?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_path = ckpt_dir.join("final.ckpt");
    state.to_checkpoint(&config_text).save(&final_path)?;

    if cfg.gallery > 0 {
        let gdir = dir.subdir("gallery")?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6761_6c6c);
        let grid = *model.grid();
        for (i, img) in train.images.iter().take(cfg.gallery).enumerate() {
            let plan = pcfg.draw_plan(grid.grid_h(), grid.grid_w(), &mut rng)?;
            let panel = gallery_image(&model, &state.params, img, &plan, &stats)?;
            write_pnm(&gdir.join(pnm_name(&format!("sample_{i:02}"), cfg.channels)), &panel)?;
        }
    }
    Ok(PretrainSummary {
        epochs: state.epoch,
        final_losses: last,
        checkpoint: final_path,
    })
}

fn check_shapes(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    let saved = RunConfig::from_text(&ck.config)
        .map_err(|e| Error::Checkpoint(format!("embedded configuration is unreadable: {e}")))?;
    let diffs = cfg.shape_differences(&saved);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("checkpoint does not match this model:\n{}", diffs.join("\n"))))
    }
}

/// Encoder weights of a pretraining checkpoint, after shape checks.
pub fn load_encoder(cfg: &RunConfig, model: &BootMae<f32>) -> Result<ParamSet<f32>> {
    if cfg.checkpoint.is_empty() {
        return Err(config_err!("a pretraining checkpoint is required (checkpoint=PATH or --checkpoint)"));
    }
    let ck = Checkpoint::load(Path::new(&cfg.checkpoint))?;
    if ck.kind != "pretrain" {
        return Err(Error::Checkpoint(format!("{} is a {} checkpoint, expected pretrain", cfg.checkpoint, ck.kind)));
    }
    check_shapes(cfg, &ck)?;
    Ok(TrainState::from_checkpoint(&ck, model)?.params.subset("enc."))
}

fn require_labels(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.labels.is_none() || test.labels.is_none() {
        return Err(contract_err!("evaluation needs labelled images"));
    }
    if test.is_empty() {
        return Err(config_err!("train_split leaves no held-out images"));
    }
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<f64> {
    cfg.validate()?;
    let resuming = !cfg.resume.is_empty();
    let owned = ["config-echo.txt", "metrics.csv", "checkpoints"];
    let dir = OutDir::prepare(out, if resuming { &[] } else { &owned }, overwrite)?;
    dir.write("config-echo.txt", &cfg.echo())?;
    let (train, test, _) = load_data(cfg)?;
    require_labels(&train, &test)?;
    let model = BootMae::<f32>::new(cfg.model_config())?;
    let classes = train.num_classes;
    let mut state = if resuming {
        let ck = Checkpoint::load(Path::new(&cfg.resume))?;
        check_shapes(cfg, &ck)?;
        FinetuneState::from_checkpoint(&ck, &model, classes)?
    } else {
        FinetuneState::new(&model, &load_encoder(cfg, &model)?, classes, cfg.seed)?
    };
    let metrics_path = dir.path("metrics.csv");
    let mut rows: Vec<EvalRow> = Vec::new();
    if resuming {
        for line in rows_before(&metrics_path, state.epoch + 1) {
            let f: Vec<&str> = line.split(',').collect();
            if let [e, s, t, l] = f[..] {
                rows.push(EvalRow {
                    epoch: e.parse().unwrap_or(0),
                    split: s.to_string(),
                    top1: t.parse().unwrap_or(f64::NAN),
                    loss: l.parse().unwrap_or(f64::NAN),
                });
            }
        }
    }
    let ckpt_dir = dir.subdir("checkpoints")?;
    let config_text = cfg.echo();
    let every = cfg.ft_checkpoint_every as u64;
    let new_rows = finetune(&model, &mut state, &train, &test, &cfg.finetune_config(), |s| {
        eprintln!("finetune epoch {}/{}", s.epoch, cfg.ft_epochs);
        if every > 0 && s.epoch % every == 0 {
            s.to_checkpoint(&config_text)
                .save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", s.epoch)))?;
        }
        Ok(())
    })?;
    rows.extend(new_rows);
    state.to_checkpoint(&config_text).save(&ckpt_dir.join("final.ckpt"))?;
    write_eval_csv(&metrics_path, &rows)?;
    let top1 = rows.iter().rev().find(|r| r.split == "test").map_or(f64::NAN, |r| r.top1);
    Ok(top1)
}

pub fn cmd_probe(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<f64> {
    cfg.validate()?;
    let dir = OutDir::prepare(out, &["config-echo.txt", "metrics.csv"], overwrite)?;
    dir.write("config-echo.txt", &cfg.echo())?;
    let (train, test, _) = load_data(cfg)?;
    require_labels(&train, &test)?;
    let model = BootMae::<f32>::new(cfg.model_config())?;
    let encoder = load_encoder(cfg, &model)?;
    let res = linear_probe(&model, &encoder, &train, &test, &cfg.probe_config(), cfg.seed)?;
    if res.rows.iter().any(|r| !r.loss.is_finite()) {
        return Err(Error::Numeric("linear probe produced a non-finite loss".into()));
    }
    write_eval_csv(&dir.path("metrics.csv"), &res.rows)?;
    Ok(res.top1)
}

/// Dark (0) for masked cells, white for visible ones; one pixel per cell.
fn mask_image(plan: &MaskPlan, gh: usize, gw: usize) -> Tensor<f32> {
    let cells = plan.to_grid();
    Tensor::from_fn(vec![gh, gw, 1], |i| if cells[i] { 0.0 } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub strategy: MaskStrategy,
    pub mean_masked: f64,
    pub mean_largest_component: f64,
}

pub fn cmd_mask_viz(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<Vec<MaskStats>> {
    cfg.validate()?;
    let owned = [
        "config-echo.txt",
        "mask_random.pgm",
        "mask_block.pgm",
        "masks_side_by_side.pgm",
        "components.csv",
        "summary.csv",
    ];
    let dir = OutDir::prepare(out, &owned, overwrite)?;
    dir.write("config-echo.txt", &cfg.echo())?;
    let grid = cfg.model_config().grid()?;
    let (gh, gw) = (grid.grid_h(), grid.grid_w());
    let mut components = String::from("strategy,sample,masked,largest_component\n");
    let mut summary = String::from("strategy,samples,mean_masked,mean_largest_component\n");
    let mut firsts = Vec::new();
    let mut stats = Vec::new();
    for strategy in [MaskStrategy::Random, MaskStrategy::Block] {
        let pcfg = crate::train::PretrainConfig { mask: strategy, ..cfg.pretrain_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut masked, mut largest) = (0usize, 0usize);
        for s in 0..cfg.viz_samples.max(1) {
            let plan = pcfg.draw_plan(gh, gw, &mut rng)?;
            let lc = largest_component(&plan, gh, gw);
            components.push_str(&format!("{strategy},{s},{},{lc}\n", plan.n_masked()));
            masked += plan.n_masked();
            largest += lc;
            if s == 0 {
                firsts.push(mask_image(&plan, gh, gw));
            }
        }
        let n = cfg.viz_samples.max(1) as f64;
        let st = MaskStats {
            strategy,
            mean_masked: masked as f64 / n,
            mean_largest_component: largest as f64 / n,
        };
        summary.push_str(&format!("{strategy},{n},{},{}\n", st.mean_masked, st.mean_largest_component));
        stats.push(st);
    }
    write_pnm(&dir.path("mask_random.pgm"), &firsts[0])?;
    write_pnm(&dir.path("mask_block.pgm"), &firsts[1])?;
    let side = Tensor::from_fn(vec![gh, 2 * gw + 1, 1], |i| {
        let (y, x) = (i / (2 * gw + 1), i % (2 * gw + 1));
        match x.cmp(&gw) {
            std::cmp::Ordering::Less => firsts[0].data()[y * gw + x],
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Greater => firsts[1].data()[y * gw + x - gw - 1],
        }
    });
    write_pnm(&dir.path("masks_side_by_side.pgm"), &side)?;
    dir.write("components.csv", &components)?;
    dir.write("summary.csv", &summary)?;
    Ok(stats)
}

/// Hash of the first `count` mask plans a strategy draws from `seed`.
pub fn plan_hash(cfg: &RunConfig, strategy: MaskStrategy, count: usize) -> Result<u64> {
    let grid = cfg.model_config().grid()?;
    let pcfg = crate::train::PretrainConfig { mask: strategy, ..cfg.pretrain_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut h = DefaultHasher::new();
    for _ in 0..count {
        pcfg.draw_plan(grid.grid_h(), grid.grid_w(), &mut rng)?.masked().hash(&mut h);
    }
    Ok(h.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub losses: (f64, f64, f64),
    pub seconds: f64,
}

impl CellResult {
    pub fn finite(&self) -> bool {
        self.losses.0.is_finite() && self.losses.1.is_finite() && self.losses.2.is_finite()
    }
}

/// Pretrains one ablation cell from scratch on the shared data and seed.
fn run_cell(cfg: &RunConfig, train: &Dataset) -> Result<((f64, f64, f64), f64)> {
    let start = Instant::now();
    let model = BootMae::<f32>::new(cfg.model_config())?;
    let pcfg = cfg.pretrain_config();
    pcfg.validate()?;
    let mut state = TrainState::new(&model, cfg.seed);
    let mut last = (f64::NAN, f64::NAN, f64::NAN);
    for _ in 0..cfg.epochs {
        last = epoch_means(&pretrain_epoch(&model, &train.images, &mut state, &pcfg)?);
    }
    Ok((last, start.elapsed().as_secs_f64()))
}

fn check_budget(start: Instant, cfg: &RunConfig, done: usize, total: usize) -> Result<()> {
    let used = start.elapsed().as_secs_f64();
    if used > cfg.budget_seconds {
        return Err(Error::Budget(format!(
            "ablation budget of {}s exhausted after {done} of {total} cells ({used:.1}s)",
            cfg.budget_seconds
        )));
    }
    Ok(())
}

/// Pixel or feature targets crossed with random or block masking.
pub fn cmd_ablate_mask(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let dir = OutDir::prepare(out, &["config-echo.txt", "ablate_mask.csv"], overwrite)?;
    dir.write("config-echo.txt", &cfg.echo())?;
    let (train, _, _) = load_data(cfg)?;
    let start = Instant::now();
    let mut csv = String::from("targets,mask,lambda,epochs,L_R,L_P,L,finite,seconds,plan_hash\n");
    let mut results = Vec::new();
    let cells = [
        (TargetKind::Pixel, MaskStrategy::Random),
        (TargetKind::Pixel, MaskStrategy::Block),
        (TargetKind::Feature, MaskStrategy::Random),
        (TargetKind::Feature, MaskStrategy::Block),
    ];
    for (i, &(targets, mask)) in cells.iter().enumerate() {
        let mut c = cfg.clone();
        c.targets = targets;
        c.mask = mask;
        c.lambda = match targets {
            TargetKind::Pixel => 0.0,
            _ if cfg.lambda > 0.0 => cfg.lambda,
            _ => 1.0,
        };
        let (losses, seconds) = run_cell(&c, &train)?;
        let hash = plan_hash(&c, mask, c.batch_size)?;
        let r = CellResult {
            label: format!("{targets}/{mask}"),
            losses,
            seconds,
        };
        csv.push_str(&format!(
            "{targets},{mask},{},{},{},{},{},{},{seconds:.3},{hash:016x}\n",
            c.lambda,
            c.epochs,
            losses.0,
            losses.1,
            losses.2,
            r.finite()
        ));
        eprintln!("cell {}: L {:.4} ({seconds:.1}s)", r.label, losses.2);
        results.push(r);
        dir.write("ablate_mask.csv", &csv)?;
        check_budget(start, cfg, i + 1, cells.len())?;
    }
    if let Some(bad) = results.iter().find(|r| !r.finite()) {
        return Err(Error::Numeric(format!("cell {} finished with non-finite losses", bad.label)));
    }
    Ok(results)
}

/// Regressor injection level crossed with predictor injection level.
/// `rows` restricts the regressor levels; empty means all three.
pub fn cmd_ablate_inject(cfg: &RunConfig, rows: &[Tap], out: &Path, overwrite: bool) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let dir = OutDir::prepare(out, &["config-echo.txt", "ablate_inject.csv"], overwrite)?;
    dir.write("config-echo.txt", &cfg.echo())?;
    let (train, _, _) = load_data(cfg)?;
    let levels = [Tap::Low, Tap::Mid, Tap::High];
    let reg_levels: &[Tap] = if rows.is_empty() { &levels } else { rows };
    let total = reg_levels.len() * levels.len();
    let start = Instant::now();
    let mut csv = String::from("reg_tap,pred_tap,epochs,L_R,L_P,L,finite,seconds\n");
    let mut results = Vec::new();
    for &reg in reg_levels {
        for &pred in &levels {
            let mut c = cfg.clone();
            c.reg_tap = Injection(Some(reg));
            c.pred_tap = Injection(Some(pred));
            let (losses, seconds) = run_cell(&c, &train)?;
            let r = CellResult {
                label: format!("{reg}/{pred}"),
                losses,
                seconds,
            };
            csv.push_str(&format!(
                "{reg},{pred},{},{},{},{},{},{seconds:.3}\n",
                c.epochs,
                losses.0,
                losses.1,
                losses.2,
                r.finite()
            ));
            eprintln!("cell {}: L {:.4} ({seconds:.1}s)", r.label, losses.2);
            results.push(r);
            dir.write("ablate_inject.csv", &csv)?;
            check_budget(start, cfg, results.len(), total)?;
        }
    }
    if let Some(bad) = results.iter().find(|r| !r.finite()) {
        return Err(Error::Numeric(format!("cell {} finished with non-finite losses", bad.label)));
    }
    Ok(results)
}
