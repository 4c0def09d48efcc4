use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use tlpim_core::checkpoint::{self, Checkpoint};
use tlpim_core::dataset::{load_image, load_manifest, load_mask, manifest_dir, split_subject_disjoint, write_manifest, SampleRecord};
use tlpim_core::mask::{segmentation_report, PmiBins};
use tlpim_core::matcher::{cap_results_csv, decide, eval_by_pmi, read_match_records, write_match_records, MatchRecord, PmiEvalConfig};
use tlpim_core::net::NetConfig;
use tlpim_core::pipeline::{embed_crops, prepare_image, prepare_records, sample_evidence, score_cross_session, train_samples, PreparedSample};
use tlpim_core::synth::{generate_dataset, SynthConfig};
use tlpim_core::train::{train as run_training, TrainConfig};
use tlpim_core::visual::{export_layer_bundle, LayerFlags, PairEvidence};
use tlpim_review::{build_queue, router, Review, ReviewError};

use crate::{EvalArgs, GenArgs, MatchArgs, RenderArgs, SegevalArgs, ServeArgs, SplitArgs, TrainArgs};

/// 2 for filesystem failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tlpim_core::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<ReviewError>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| tlpim_core::Error::io(path, e))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn gen(args: GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_identities: args.identities,
        samples_per_identity: args.samples,
        image_size: args.size,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&cfg, &args.out)?;
    eprintln!(
        "wrote {} samples of {} identities to {}",
        args.identities * args.samples,
        args.identities,
        manifest.display()
    );
    Ok(())
}

/// Paths re-based for a manifest written to `target`: unchanged when it
/// shares the source directory, absolute otherwise.
fn rebase(records: &[SampleRecord], source_dir: &Path, target: &Path) -> Result<Vec<SampleRecord>> {
    let canonical = |p: &Path| fs::canonicalize(p).map_err(|e| tlpim_core::Error::io(p, e));
    let target_dir = manifest_dir(target);
    fs::create_dir_all(&target_dir).map_err(|e| tlpim_core::Error::io(&target_dir, e))?;
    if canonical(source_dir)? == canonical(&target_dir)? {
        return Ok(records.to_vec());
    }
    let source = canonical(source_dir)?;
    Ok(records
        .iter()
        .map(|r| SampleRecord {
            image_path: source.join(&r.image_path),
            mask_path: source.join(&r.mask_path),
            ..r.clone()
        })
        .collect())
}

pub fn split(args: SplitArgs) -> Result<()> {
    let records = load_manifest(&args.manifest)?;
    let (train, test) = split_subject_disjoint(&records, args.fraction, args.seed)?;
    let source = manifest_dir(&args.manifest);
    write_manifest(&args.out_train, &rebase(&train, &source, &args.out_train)?)?;
    write_manifest(&args.out_test, &rebase(&test, &source, &args.out_test)?)?;
    eprintln!("split {} samples into {} train and {} test", records.len(), train.len(), test.len());
    Ok(())
}

pub fn segeval(args: SegevalArgs) -> Result<()> {
    let bins = PmiBins::new(args.bins.clone())?;
    let pred = load_manifest(&args.pred_manifest)?;
    let gt = load_manifest(&args.gt_manifest)?;
    let (pred_dir, gt_dir) = (manifest_dir(&args.pred_manifest), manifest_dir(&args.gt_manifest));
    let mut samples = Vec::with_capacity(gt.len());
    for g in &gt {
        let id = g.sample_id();
        let p = pred
            .iter()
            .find(|p| p.sample_id() == id)
            .ok_or_else(|| tlpim_core::Error::Invalid(format!("no prediction for sample `{id}`")))?;
        samples.push((
            load_mask(&p.mask_path_in(&pred_dir))?,
            load_mask(&g.mask_path_in(&gt_dir))?,
            g.pmi_hours,
        ));
    }
    let report = segmentation_report(&samples, &bins)?;
    eprintln!("mean iris IoU {:.4} (std {:.4}) over {} samples", report.mean, report.stddev, samples.len());
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_output(args.out.as_deref(), &json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    net: NetConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn load_train_file(path: Option<&Path>) -> Result<TrainFile> {
    let Some(path) = path else {
        return Ok(TrainFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| tlpim_core::Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| tlpim_core::Error::Invalid(format!("{}: {e}", path.display())).into())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = load_train_file(args.config.as_deref())?;
    file.net.validate()?;
    file.train.validate()?;
    let records = load_manifest(&args.manifest)?;
    let base = manifest_dir(&args.manifest);
    let size = file.net.input_size;
    let (train_set, val_set) = match &args.val_manifest {
        Some(path) => (
            train_samples(&records, &base, size)?,
            train_samples(&load_manifest(path)?, &manifest_dir(path), size)?,
        ),
        None => {
            let (t, v) = split_subject_disjoint(&records, 0.8, file.train.seed)?;
            (train_samples(&t, &base, size)?, train_samples(&v, &base, size)?)
        }
    };
    eprintln!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let outcome = run_training(&train_set, &val_set, &file.net, &file.train)?;
    eprintln!(
        "stopped after {} iterations; best validation loss {:.6}; threshold {:.6}",
        outcome.iterations, outcome.best_val_loss, outcome.threshold
    );
    checkpoint::save(
        &args.out_checkpoint,
        &Checkpoint {
            net: outcome.net,
            threshold: Some(outcome.threshold),
        },
    )?;
    if let Some(log) = &args.log {
        outcome.log.write_csv(log)?;
    }
    Ok(())
}

/// Parses `IMAGE[,MASK]` and crops the sample for the network.
fn prepare_input(arg: &str, size: usize) -> Result<PreparedSample> {
    let (image_path, mask_path) = match arg.split_once(',') {
        Some((i, m)) => (PathBuf::from(i), Some(PathBuf::from(m))),
        None => (PathBuf::from(arg), None),
    };
    let image = load_image(&image_path)?;
    let masks = mask_path.as_deref().map(load_mask).transpose()?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    Ok(prepare_image(id, &image, masks.as_ref(), size)?)
}

fn threshold_of(ckpt: &Checkpoint, flag: Option<f64>) -> Result<f64> {
    match flag.or(ckpt.threshold) {
        Some(t) => Ok(t),
        None => bail!(tlpim_core::Error::Invalid(
            "checkpoint stores no threshold; pass --threshold".into()
        )),
    }
}

pub fn match_pairs(args: MatchArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let threshold = threshold_of(&ckpt, args.threshold)?;
    let net = &ckpt.net;
    let size = net.config.input_size;
    let records = match (&args.a, &args.b, &args.manifest) {
        (Some(a), Some(b), _) => {
            let (pa, pb) = (prepare_input(a, size)?, prepare_input(b, size)?);
            let e = embed_crops(net, &[&pa.crop, &pb.crop])?;
            vec![MatchRecord::score(pa.sample_id, pb.sample_id, &e[0], &e[1], threshold)?]
        }
        (_, _, Some(manifest)) => {
            let records = load_manifest(manifest)?;
            let prepared = prepare_records(&records, &manifest_dir(manifest), size)?;
            let crops: Vec<_> = prepared.iter().map(|p| &p.crop).collect();
            let embeddings = embed_crops(net, &crops)?;
            score_cross_session(&records, &embeddings, threshold)?
        }
        _ => bail!(tlpim_core::Error::Invalid("pass --a and --b, or --manifest".into())),
    };
    eprintln!("scored {} pairs at threshold {threshold:.6}", records.len());
    let mut buf = Vec::new();
    write_match_records(&mut buf, &records)?;
    write_output(args.out.as_deref(), &String::from_utf8(buf)?)
}

fn parse_cap(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" | "∞" => Ok(f64::INFINITY),
        other => other
            .parse()
            .map_err(|_| tlpim_core::Error::Invalid(format!("bad PMI cap `{other}`")).into()),
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = PmiEvalConfig {
        reference_max_pmi: args.ref_max,
        probe_caps: args.caps.iter().map(|c| parse_cap(c)).collect::<Result<_>>()?,
    };
    let pairs = read_match_records(&args.pairs)?;
    let results = eval_by_pmi(&pairs, &cfg)?;
    eprintln!("evaluated {} pairs at {} caps", pairs.len(), results.len());
    write_output(args.out.as_deref(), &cap_results_csv(&results))
}

pub fn render(args: RenderArgs) -> Result<()> {
    let flags = LayerFlags::parse(&args.layers)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let threshold = threshold_of(&ckpt, args.threshold)?;
    let size = ckpt.net.config.input_size;
    let (ea, a) = sample_evidence(&ckpt.net, &prepare_input(&args.a, size)?)?;
    let (eb, b) = sample_evidence(&ckpt.net, &prepare_input(&args.b, size)?)?;
    let similarity = tlpim_core::matcher::similarity(&ea, &eb)?;
    let pair = PairEvidence {
        pair_id: format!("{}_vs_{}", a.sample_id, b.sample_id),
        probe: a,
        reference: b,
        similarity,
        decision: decide(similarity, threshold),
    };
    let index = export_layer_bundle(&pair, &args.out_dir, flags)?;
    eprintln!("similarity {similarity:.6} ({}); bundle index {}", pair.decision, index.display());
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let records = load_manifest(&args.manifest)?;
    let queue = build_queue(&records, &manifest_dir(&args.manifest), &ckpt, args.threshold)?;
    eprintln!("queued {} pairs at threshold {:.6}", queue.len(), queue.threshold);
    let review = Arc::new(Review::open(queue, &args.verdicts)?);
    let app = router(review, args.static_dir);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let addr = std::net::SocketAddr::from(([127, 0, 0, 1], args.port));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
