use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use rand::Rng as _;

use vpe_core::data::{generate_benchmark, Dataset, ImageTensor};
use vpe_core::model::{embed, load_checkpoint, save_checkpoint, smoothed_loss, Checkpoint, Trainer, TrainingSet, Vpe};
use vpe_core::nn::BnMode;
use vpe_core::oneshot::{build_support, evaluate, evaluate_dataset, protocol_split, Protocol, Query};
use vpe_core::retrieval::{average_image, distance_heatmap, mean_pr_auc, pr_auc, retrieve, GalleryItem};
use vpe_core::rng;

use crate::config::{collect_settings, RunConfig};
use crate::run_dir::RunDir;
use crate::{Common, EvalOneshotArgs, EvalRetrievalArgs, ExportArgs, GenDataArgs, ReconstructArgs, TrainArgs, UsageError};

/// Window of the moving average reported as the smoothed loss.
const SMOOTHING_WINDOW: usize = 50;
const EMBED_CHUNK: usize = 256;

struct Flags(Vec<(String, String)>);

impl Flags {
    fn new(common: &Common) -> Result<Self> {
        let mut f = Flags(Vec::new());
        f.opt("preset", common.preset.as_ref());
        for s in &common.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{s}`")))?;
            f.0.push((k.trim().to_string(), v.trim().to_string()));
        }
        f.opt("seed", common.seed.as_ref());
        Ok(f)
    }

    fn opt(&mut self, key: &str, value: Option<&impl Display>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
    }

    fn path(&mut self, key: &str, value: Option<&PathBuf>) {
        self.opt(key, value.map(|p| p.display()).as_ref());
    }

    fn resolve(self, common: &Common) -> Result<RunConfig> {
        let settings = collect_settings(common.config.as_deref(), |k| std::env::var(k).ok(), self.0)?;
        Ok(RunConfig::from_settings(&settings)?)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| UsageError(format!("missing --{key} (or `{key}` in the config)")).into())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if !ckpt.model.has_running_stats() {
        warn!("{} has no batch-norm statistics; evaluation will fail", path.display());
    }
    Ok(ckpt)
}

fn open_dataset(root: &Path, model: &Vpe<f32>) -> Result<Dataset> {
    Ok(Dataset::open(root, model.config.input_size, model.config.in_channels)?)
}

fn embed_paths(model: &mut Vpe<f32>, dataset: &Dataset, paths: &[&Path]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(paths.len());
    for chunk in paths.chunks(EMBED_CHUNK) {
        let images = chunk.iter().map(|p| dataset.load_image(p)).collect::<vpe_core::Result<Vec<_>>>()?;
        let emb = embed(model, &ImageTensor::stack(&images)?, EMBED_CHUNK)?;
        out.extend(emb.data().chunks(model.config.latent_dim).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut f = Flags::new(&args.common)?;
    f.opt("classes", args.classes.as_ref());
    f.opt("unseen", args.unseen.as_ref());
    f.opt("per_class", args.per_class.as_ref());
    f.opt("image_size", args.image_size.as_ref());
    f.opt("held_out", args.held_out.as_ref());
    f.opt("imbalance", args.imbalance.as_ref());
    f.path("out", args.out.as_ref());
    let cfg = f.resolve(&args.common)?;
    let out = required(&cfg.out, "out")?;
    cfg.bench.validate()?;
    let dir = RunDir::open(out, &cfg)?;
    let manifest = generate_benchmark(&cfg.bench, &dir.path)?;
    info!(
        "wrote {} classes ({} unseen), {} real images to {}",
        manifest.classes.len(),
        manifest.unseen().count(),
        manifest.num_reals(),
        out.display()
    );
    Ok(())
}

fn dump_batch(trainer: &Trainer, set: &TrainingSet, dir: &Path) -> Result<()> {
    const COLUMNS: usize = 16;
    let batch = trainer.batch(set, trainer.iteration)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, tensor) in [("inputs.png", &batch.input), ("targets.png", &batch.target)] {
        let n = tensor.shape()[0];
        let images = (0..n)
            .map(|i| ImageTensor::from_batch(tensor, i).map(|im| im.with_channels(3)))
            .collect::<vpe_core::Result<Vec<_>>>()?;
        let rows = images
            .chunks(COLUMNS)
            .map(|row| {
                let mut row = row.to_vec();
                let blank = ImageTensor::zeros(3, row[0].height(), row[0].width());
                row.resize(COLUMNS, blank);
                ImageTensor::hconcat(&row, 1)
            })
            .collect::<vpe_core::Result<Vec<_>>>()?;
        ImageTensor::vconcat(&rows, 1)?.save_png(&dir.join(name))?;
    }
    let mut labels = String::from("slot,label,prototype_input\n");
    for (i, (l, p)) in batch.labels.iter().zip(&batch.prototype_slots).enumerate() {
        let _ = writeln!(labels, "{i},{l},{p}");
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

fn loss_csv(trainer: &Trainer) -> String {
    let smooth = smoothed_loss(&trainer.trace, SMOOTHING_WINDOW);
    let mut s = String::from("iteration,loss,recon,kl,smoothed\n");
    for (r, sm) in trainer.trace.iter().zip(smooth) {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.loss, r.recon, r.kl, sm);
    }
    s
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut f = Flags::new(&args.common)?;
    f.opt("iterations", args.iterations.as_ref());
    f.opt("lr", args.lr.as_ref());
    f.opt("batch_size", args.batch_size.as_ref());
    f.opt("validate_every", args.validate_every.as_ref());
    if args.baseline_vae {
        f.opt("target_mode", Some(&"self"));
    }
    if args.no_aug {
        f.opt("augment", Some(&false));
    }
    f.path("data", args.data.as_ref());
    f.path("out", args.out.as_ref());
    f.path("checkpoint", args.resume.as_ref());
    let cfg = f.resolve(&args.common)?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;

    let mut trainer = match &cfg.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.config != cfg.model {
                warn!("resuming with the model configuration stored in {}", path.display());
            }
            info!("resuming {} at iteration {}", path.display(), ckpt.iteration);
            Trainer::resume(ckpt, cfg.train.clone())
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let dataset = open_dataset(data, &trainer.model)?;
    let set = TrainingSet::from_dataset(&dataset)?;
    if cfg.validate_every > 0 && protocol_split(&dataset, Protocol::Seen).1.is_empty() {
        return Err(UsageError("--validate-every needs held-out seen-class images (real_test_*.png)".into()).into());
    }
    info!(
        "{} training classes, {} real images, {} parameters",
        set.num_classes(),
        set.num_reals(),
        trainer.model.num_parameters()
    );

    let dir = RunDir::open(out, &cfg)?;
    if let Some(d) = &args.dump_targets {
        dump_batch(&trainer, &set, d)?;
    }
    let mut best: Option<f64> = None;
    let mut validation = String::from("iteration,seen_accuracy\n");
    let (log_every, validate_every) = (cfg.log_every, cfg.validate_every);
    let result = trainer.run(&set, cfg.iterations, |t, r| {
        let done = r.iteration + 1;
        if log_every > 0 && (done % log_every == 0 || r.iteration == 0) {
            let sm = smoothed_loss(&t.trace[t.trace.len().saturating_sub(SMOOTHING_WINDOW)..], SMOOTHING_WINDOW);
            info!(
                "iter {done}: loss {:.2} (recon {:.2}, kl {:.2}), smoothed {:.2}",
                r.loss,
                r.recon,
                r.kl,
                sm.last().copied().unwrap_or(r.loss)
            );
        }
        if validate_every > 0 && done % validate_every == 0 {
            let mut model = t.model.clone();
            let report = evaluate_dataset(&mut model, &dataset, Protocol::Seen, "validation")?;
            let _ = writeln!(validation, "{done},{}", report.accuracy);
            info!("iter {done}: seen-class validation accuracy {:.4}", report.accuracy);
            if best.is_none_or(|b| report.accuracy > b) {
                best = Some(report.accuracy);
                save_checkpoint(&dir.file("best.vpec"), &t.checkpoint())?;
            }
        }
        Ok(())
    });
    dir.write("loss.csv", loss_csv(&trainer))?;
    if validate_every > 0 {
        dir.write("validation.csv", validation)?;
    }
    result?;
    save_checkpoint(&dir.file("model.vpec"), &trainer.checkpoint())?;
    let smooth = smoothed_loss(&trainer.trace, SMOOTHING_WINDOW);
    if let (Some(first), Some(last)) = (trainer.trace.first(), smooth.last()) {
        info!("loss {:.2} -> smoothed {:.2} after {} iterations", first.loss, last, trainer.trace.len());
    }
    info!("checkpoint written to {}", dir.file("model.vpec").display());
    Ok(())
}

fn parse_protocols(names: &[String]) -> Result<Vec<Protocol>> {
    if names.is_empty() {
        return Ok(Protocol::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| n.parse::<Protocol>().map_err(|e| UsageError(e.to_string()).into()))
        .collect()
}

pub fn eval_oneshot(args: EvalOneshotArgs) -> Result<()> {
    let protocols = parse_protocols(&args.protocols)?;
    let mut f = Flags::new(&args.common)?;
    f.path("checkpoint", args.checkpoint.as_ref());
    f.path("data", args.data.as_ref());
    f.path("out", args.out.as_ref());
    let cfg = f.resolve(&args.common)?;
    let ckpt_path = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let mut model = load_model(ckpt_path)?.model;
    let dataset = open_dataset(data, &model)?;
    let dir = RunDir::open(out, &cfg)?;
    let tag = ckpt_path.display().to_string();
    let names: BTreeMap<usize, String> = dataset.manifest.classes.iter().map(|c| (c.label, c.name.clone())).collect();
    for protocol in protocols {
        let report = if args.oracle {
            let (labels, files) = protocol_split(&dataset, protocol);
            let protos = labels
                .iter()
                .map(|&l| Ok((l, dataset.prototype(l)?)))
                .collect::<vpe_core::Result<Vec<_>>>()?;
            let support = build_support(&mut model, &protos)?;
            let queries: Vec<Query> = files
                .into_iter()
                .map(|(id, label, _)| Query {
                    id,
                    label,
                    embedding: support.embedding(label).map(<[f32]>::to_vec).unwrap_or_default(),
                })
                .collect();
            evaluate(protocol, &support, &queries, &names, &format!("{tag} (oracle)"))?
        } else {
            evaluate_dataset(&mut model, &dataset, protocol, &tag)?
        };
        dir.write(&format!("oneshot_{protocol}.json"), report.to_json())?;
        dir.write(&format!("predictions_{protocol}.csv"), report.predictions_csv())?;
        println!(
            "{protocol}: accuracy {:.4} ({}/{}), {}-way",
            report.accuracy, report.correct, report.total, report.support_size
        );
    }
    Ok(())
}

fn read_categories(path: &Path, dataset: &Dataset) -> Result<BTreeMap<usize, usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut ids: Vec<String> = Vec::new();
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (name, cat) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| UsageError(format!("{}: expected `class category`, got `{line}`", path.display())))?;
        let class = dataset
            .manifest
            .by_name(name)
            .ok_or_else(|| UsageError(format!("{}: unknown class `{name}`", path.display())))?;
        let cat = cat.trim().to_string();
        let id = ids.iter().position(|c| *c == cat).unwrap_or_else(|| {
            ids.push(cat);
            ids.len() - 1
        });
        out.insert(class.label, id);
    }
    Ok(out)
}

pub fn eval_retrieval(args: EvalRetrievalArgs) -> Result<()> {
    let mut f = Flags::new(&args.common)?;
    f.opt("top_k", args.top_k.as_ref());
    f.path("checkpoint", args.checkpoint.as_ref());
    f.path("data", args.data.as_ref());
    f.path("out", args.out.as_ref());
    let cfg = f.resolve(&args.common)?;
    let ckpt_path = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let all = match args.scope.as_str() {
        "unseen" => false,
        "all" => true,
        other => return Err(UsageError(format!("unknown scope `{other}` (unseen, all)")).into()),
    };
    let mut model = load_model(ckpt_path)?.model;
    let dataset = open_dataset(data, &model)?;
    let categories = args.categories.as_deref().map(|p| read_categories(p, &dataset)).transpose()?;
    let classes: Vec<_> = dataset.manifest.classes.iter().filter(|c| all || !c.seen).collect();
    if classes.is_empty() {
        return Err(UsageError("no classes in the requested scope".into()).into());
    }

    let protos = classes
        .iter()
        .map(|c| Ok((c.label, dataset.prototype(c.label)?)))
        .collect::<vpe_core::Result<Vec<_>>>()?;
    let support = build_support(&mut model, &protos)?;
    let files: Vec<(usize, &Path)> = classes
        .iter()
        .flat_map(|c| c.query_reals().map(move |r| (c.label, r.path.as_path())))
        .collect();
    let paths: Vec<&Path> = files.iter().map(|f| f.1).collect();
    let embeddings = if args.oracle {
        files
            .iter()
            .map(|(l, _)| support.embedding(*l).expect("class in support").to_vec())
            .collect()
    } else {
        embed_paths(&mut model, &dataset, &paths)?
    };
    let gallery: Vec<GalleryItem> = files
        .iter()
        .zip(&embeddings)
        .enumerate()
        .map(|(id, ((label, _), e))| GalleryItem {
            id,
            label: *label,
            embedding: e.clone(),
        })
        .collect();

    let dir = RunDir::open(out, &cfg)?;
    let k = cfg.top_k.min(gallery.len());
    if k < cfg.top_k {
        warn!("top_k {} exceeds the gallery of {}; averaging {k}", cfg.top_k, gallery.len());
    }
    let avg_dir = dir.file("average");
    std::fs::create_dir_all(&avg_dir)?;
    let rel = |p: &Path| p.strip_prefix(&dataset.manifest.root).unwrap_or(p).display().to_string();
    let mut auc_table = String::from("class_label,class_name,auc\n");
    let mut ranking_rows = String::from("query_label,rank,item_id,item_label,distance\n");
    let mut rankings = Vec::with_capacity(classes.len());
    let mut panels = Vec::with_capacity(classes.len());
    for (class, (label, proto_emb)) in classes.iter().zip(support.entries()) {
        let ranking = retrieve(*label, proto_emb, &gallery)?;
        let auc = pr_auc(&ranking)?;
        let _ = writeln!(auc_table, "{label},{},{auc}", class.name);
        for (rank, item) in ranking.items.iter().enumerate() {
            let _ = writeln!(
                ranking_rows,
                "{label},{},{},{},{}",
                rank + 1,
                rel(paths[item.id]),
                item.label,
                item.distance
            );
        }
        let avg = average_image(&ranking, k, |id| Ok(dataset.load_image(paths[id])?))?;
        avg.save_png(&avg_dir.join(format!("{}.png", class.name)))?;
        panels.push(ImageTensor::hconcat(&[dataset.prototype(*label)?, avg], 1)?.with_channels(3));
        rankings.push(ranking);
    }
    let mean = mean_pr_auc(&rankings)?;
    let _ = writeln!(auc_table, "mean,,{mean}");
    dir.write("auc.csv", auc_table)?;
    dir.write("rankings.csv", ranking_rows)?;
    ImageTensor::vconcat(&panels, 1)?.save_png(&dir.file("average_images.png"))?;

    let mut by_class: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    for ((label, _), e) in files.iter().zip(&embeddings) {
        by_class.entry(*label).or_default().push(e.clone());
    }
    let reals: Vec<(usize, Vec<Vec<f32>>)> = by_class.into_iter().collect();
    let matrix = distance_heatmap(&reals, support.entries(), true)?;
    dir.write("heatmap.csv", matrix.to_csv())?;
    let cats: Option<Vec<usize>> = categories.map(|m| {
        matrix
            .col_labels
            .iter()
            .map(|l| m.get(l).copied().unwrap_or(0))
            .collect()
    });
    matrix.render(8, cats.as_deref()).save_png(&dir.file("heatmap.png"))?;
    println!(
        "mean PR-AUC {mean:.4} over {} classes; heat map diagonal {:.4} vs off-diagonal {:.4}",
        rankings.len(),
        matrix.diagonal_mean(),
        matrix.off_diagonal_mean()
    );
    Ok(())
}

fn upscale(img: &ImageTensor, factor: usize) -> ImageTensor {
    let factor = factor.max(1);
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = ImageTensor::zeros(c, h * factor, w * factor);
    for ch in 0..c {
        for y in 0..h * factor {
            for x in 0..w * factor {
                out.set(ch, y, x, img.get(ch, y / factor, x / factor));
            }
        }
    }
    out
}

pub fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut f = Flags::new(&args.common)?;
    f.opt("rows", args.rows.as_ref());
    f.path("checkpoint", args.checkpoint.as_ref());
    f.path("data", args.data.as_ref());
    f.path("out", args.out.as_ref());
    let cfg = f.resolve(&args.common)?;
    let ckpt_path = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    if cfg.rows == 0 {
        return Err(UsageError("rows must be positive".into()).into());
    }
    let mut model = load_model(ckpt_path)?.model;
    let dataset = open_dataset(data, &model)?;
    let seen: Vec<_> = dataset.manifest.seen().filter(|c| !c.reals.is_empty()).collect();
    let unseen: Vec<_> = dataset.manifest.unseen().filter(|c| !c.reals.is_empty()).collect();
    if seen.is_empty() && unseen.is_empty() {
        return Err(vpe_core::Error::Dataset("no real images to reconstruct".into()).into());
    }
    let dir = RunDir::open(out, &cfg)?;
    let mut picks = Vec::with_capacity(cfg.rows);
    let mut listing = String::from("row,class_label,class_name,image,seen\n");
    for row in 0..cfg.rows {
        let group = if (row % 2 == 0 && !seen.is_empty()) || unseen.is_empty() { &seen } else { &unseen };
        let class = group[(row / 2) % group.len()];
        // Held-out images first, so seen rows show images the model never trained on.
        let pool: Vec<_> = class.query_reals().collect();
        let pool = if pool.is_empty() { class.reals.iter().collect() } else { pool };
        let mut r = rng::substream(cfg.train.seed, "reconstruct", row as u64);
        let real = pool[r.random_range(0..pool.len())];
        let _ = writeln!(
            listing,
            "{row},{},{},{},{}",
            class.label,
            class.name,
            real.path.file_name().unwrap_or_default().to_string_lossy(),
            class.seen
        );
        picks.push((class.label, dataset.load_image(&real.path)?));
    }
    let inputs: Vec<&ImageTensor> = picks.iter().map(|p| &p.1).collect();
    let x = ImageTensor::stack(inputs)?;
    let mu = model.encode(&x, BnMode::Eval)?.mean;
    let decoded = model.decode(&mu, BnMode::Eval)?;
    let mut rows = Vec::with_capacity(picks.len());
    for (i, (label, input)) in picks.iter().enumerate() {
        let out_img = ImageTensor::from_batch(&decoded, i)?;
        let proto = dataset.prototype(*label)?;
        rows.push(ImageTensor::hconcat(
            &[input.with_channels(3), out_img.with_channels(3), proto.with_channels(3)],
            1,
        )?);
    }
    let grid = upscale(&ImageTensor::vconcat(&rows, 1)?, args.scale);
    grid.save_png(&dir.file("reconstruction.png"))?;
    dir.write("reconstruction.csv", listing)?;
    info!("{} rows written to {}", cfg.rows, dir.file("reconstruction.png").display());
    Ok(())
}

pub fn export_embeddings(args: ExportArgs) -> Result<()> {
    let mut f = Flags::new(&args.common)?;
    f.path("checkpoint", args.checkpoint.as_ref());
    f.path("data", args.data.as_ref());
    f.path("out", args.out.as_ref());
    let cfg = f.resolve(&args.common)?;
    let ckpt_path = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let mut model = load_model(ckpt_path)?.model;
    let dataset = open_dataset(data, &model)?;
    let mut items: Vec<(String, usize, &Path)> = Vec::new();
    for class in &dataset.manifest.classes {
        items.push((format!("{}/prototype.png", class.name), class.label, class.prototype.as_path()));
        for real in &class.reals {
            let file = real.path.file_name().unwrap_or_default().to_string_lossy();
            items.push((format!("{}/{file}", class.name), class.label, real.path.as_path()));
        }
    }
    let paths: Vec<&Path> = items.iter().map(|i| i.2).collect();
    let embeddings = embed_paths(&mut model, &dataset, &paths)?;
    let dir = RunDir::open(out, &cfg)?;
    let mut csv = String::from("item_id,class_label");
    for j in 1..=model.config.latent_dim {
        let _ = write!(csv, ",e{j}");
    }
    csv.push('\n');
    for ((id, label, _), e) in items.iter().zip(&embeddings) {
        let _ = write!(csv, "{id},{label}");
        for v in e {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    dir.write("embeddings.csv", csv)?;
    info!("{} embeddings of dimension {} written", items.len(), model.config.latent_dim);
    Ok(())
}
