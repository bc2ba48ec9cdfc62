use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use boxforge_client::ReviewClient;
use boxforge_core::croppipe::{execute_crops, plan_crops, small_box_report, FsRasterStore};
use boxforge_core::detections::read_detections;
use boxforge_core::evaluation::{
    evaluate, metrics_csv, nms, parse_threshold_range, MetricsSummary,
};
use boxforge_core::labelio::{index_dataset, IndexOptions, ParseMode};
use boxforge_core::ledger::{parse_series_csv, split, split_stratified, IterationConfig, Ledger};
use boxforge_core::review::{import_detections, ReviewSession};
use boxforge_core::{DatasetIndex, LabelState};
use boxforge_server::{router, AppState, ServerConfig};
use serde::Serialize;
use serde_json::json;

use crate::failure::Failure;
use crate::{Command, DataArgs, Format, LedgerCommand, RecordArgs};

type Outcome = Result<(), Failure>;

fn emit(value: &impl Serialize) -> Outcome {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, &text)
}

fn load_index(root: &Path, strict: bool) -> Result<DatasetIndex, Failure> {
    let opts = IndexOptions {
        parse_mode: if strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        },
        ..IndexOptions::default()
    };
    Ok(index_dataset(root, &opts)?)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: 2,
        message: format!("cannot start async runtime: {e}"),
    })
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Index { data, out } => index(data, out),
        Command::Split {
            data,
            ratio,
            seed,
            stratified,
            out,
        } => split_cmd(data, ratio, seed, stratified, out),
        Command::Crop {
            data,
            dets,
            out,
            vehicle_classes,
            pad,
            min_visibility,
            min_conf,
        } => crop(
            data,
            &dets,
            &out,
            vehicle_classes,
            pad,
            min_visibility,
            min_conf,
        ),
        Command::Diagnose {
            data,
            input_side,
            min_px,
            all,
            out,
        } => diagnose(data, input_side, min_px, all, out),
        Command::Eval {
            dets,
            gt,
            iou,
            nms,
            iteration,
            format,
            strict,
            out,
        } => eval(&dets, &gt, &iou, nms, &iteration, format, strict, out),
        Command::Import {
            dets,
            images,
            queue,
            conf,
            queue_id,
            iteration,
            overwrite,
        } => import(&dets, &images, &queue, conf, queue_id, iteration, overwrite),
        Command::Serve {
            addr,
            queue,
            export_root,
            ui,
        } => serve(addr, queue, export_root, ui),
        Command::Export {
            queue,
            out,
            server,
            force,
        } => match (server, queue, out) {
            (Some(url), _, _) => export_remote(&url, force),
            (None, Some(queue), Some(out)) => {
                emit(&ReviewSession::open(&queue)?.export(&out, force)?)
            }
            _ => Err(Failure::invalid(
                "export needs --queue and --out, or --server",
            )),
        },
        Command::Ledger { manifest, command } => {
            let path = manifest.ok_or_else(|| {
                Failure::invalid("no manifest path: pass --manifest or set BOXFORGE_MANIFEST")
            })?;
            ledger(Ledger::open(path)?, command)
        }
    }
}

fn index(data: DataArgs, out: Option<PathBuf>) -> Outcome {
    let idx = load_index(&data.root, data.strict)?;
    if let Some(out) = out {
        write_json(&out.join("index.json"), &idx)?;
    }
    emit(&json!({
        "root": idx.root,
        "images": idx.entries.len(),
        "labeled": idx.count(LabelState::Labeled),
        "negative": idx.count(LabelState::Negative),
        "unlabeled": idx.count(LabelState::Unlabeled),
        "boxes": idx.entries.iter().map(|e| e.boxes.len()).sum::<usize>(),
        "orphans": idx.orphans,
        "clamped": idx.clamped,
    }))
}

fn split_cmd(
    data: DataArgs,
    ratio: f64,
    seed: u64,
    stratified: bool,
    out: Option<PathBuf>,
) -> Outcome {
    let idx = load_index(&data.root, data.strict)?;
    let s = if stratified {
        split_stratified(&idx, ratio, seed)?
    } else {
        split(&idx, ratio, seed)?
    };
    let report = json!({
        "ratio": ratio,
        "seed": seed,
        "stratified": stratified,
        "train_count": s.train.len(),
        "val_count": s.val.len(),
        "train": s.train,
        "val": s.val,
    });
    if let Some(out) = out {
        let list = |ids: &[String]| -> String {
            ids.iter()
                .filter_map(|id| idx.get(id))
                .map(|e| format!("{}\n", e.image_path.display()))
                .collect()
        };
        write_file(&out.join("train.txt"), &list(&s.train))?;
        write_file(&out.join("val.txt"), &list(&s.val))?;
        write_json(&out.join("split.json"), &report)?;
    }
    emit(&report)
}

fn crop(
    data: DataArgs,
    dets: &Path,
    out: &Path,
    vehicle_classes: Vec<u32>,
    pad: f64,
    min_visibility: f64,
    min_conf: f64,
) -> Outcome {
    let idx = load_index(&data.root, data.strict)?;
    let dets: Vec<_> = read_detections(dets)?
        .into_iter()
        .filter(|d| d.confidence >= min_conf)
        .collect();
    let classes: BTreeSet<u32> = vehicle_classes.into_iter().collect();
    let jobs = plan_crops(&dets, &classes, pad, &idx.dims())?;
    let outcome = execute_crops(&jobs, &idx, &FsRasterStore, min_visibility, out)?;
    let report = json!({
        "out_root": out,
        "images": outcome.index.entries.len(),
        "report": outcome.report,
    });
    write_json(&out.join("crop_report.json"), &report)?;
    emit(&report)
}

fn diagnose(
    data: DataArgs,
    input_side: u32,
    min_px: f64,
    all: bool,
    out: Option<PathBuf>,
) -> Outcome {
    let idx = load_index(&data.root, data.strict)?;
    let findings = small_box_report(&idx, input_side, min_px)?;
    let flagged = findings.iter().filter(|f| f.flagged).count();
    let listed: Vec<_> = findings.iter().filter(|f| all || f.flagged).collect();
    let report = json!({
        "input_side": input_side,
        "min_px": min_px,
        "boxes": findings.len(),
        "flagged": flagged,
        "findings": listed,
    });
    if let Some(out) = out {
        write_json(&out.join("small_boxes.json"), &report)?;
    }
    emit(&report)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    dets: &Path,
    gt: &Path,
    iou: &str,
    nms_iou: Option<f64>,
    iteration: &str,
    format: Format,
    strict: bool,
    out: Option<PathBuf>,
) -> Outcome {
    let thresholds = parse_threshold_range(iou)?;
    let mut dets = read_detections(dets)?;
    if let Some(t) = nms_iou {
        dets = nms(&dets, t)?;
    }
    let idx = load_index(gt, strict)?;
    let metrics: MetricsSummary = evaluate(&dets, &idx.ground_truth(), &idx.dims(), &thresholds)?;
    let csv = metrics_csv([(iteration, &metrics)]);
    if let Some(out) = out {
        write_json(&out.join("metrics.json"), &metrics)?;
        write_file(&out.join("metrics.csv"), &csv)?;
    }
    match format {
        Format::Json => emit(&metrics),
        Format::Csv => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn import(
    dets: &Path,
    images: &Path,
    queue_path: &Path,
    conf: f64,
    queue_id: Option<String>,
    iteration: Option<String>,
    overwrite: bool,
) -> Outcome {
    if queue_path.exists() && !overwrite {
        return Err(Failure::invalid(format!(
            "{} already exists; pass --overwrite to replace it and its journal",
            queue_path.display()
        )));
    }
    let image_root = fs::canonicalize(images).map_err(|e| Failure::io(images, e))?;
    let queue_id = queue_id.unwrap_or_else(|| {
        queue_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "queue".into())
    });
    let imported = import_detections(
        &read_detections(dets)?,
        conf,
        &queue_id,
        iteration.as_deref(),
    )?;
    let mut queue = imported.queue;
    queue.image_root = Some(image_root);
    let session = ReviewSession::create(queue_path, queue)?;
    emit(&json!({
        "queue": session.queue_path(),
        "journal": session.journal_path(),
        "queue_id": session.queue().queue_id,
        "items": session.queue().items.len(),
        "images": session.queue().summary().images,
        "dropped": imported.dropped,
    }))
}

fn serve(
    addr: std::net::SocketAddr,
    queue: PathBuf,
    export_root: PathBuf,
    ui: Option<PathBuf>,
) -> Outcome {
    let config = ServerConfig {
        queue_path: queue,
        export_root,
        ui_dir: ui,
    };
    let state = Arc::new(AppState::open(&config)?);
    let app = router(state, config.ui_dir.as_deref());
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure {
                code: 2,
                message: format!("cannot listen on {addr}: {e}"),
            })?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        boxforge_server::serve(listener, app, shutdown)
            .await
            .map_err(|e| Failure {
                code: 2,
                message: format!("review service failed: {e}"),
            })
    })
}

fn export_remote(url: &str, force: bool) -> Outcome {
    let client = ReviewClient::new(url)?;
    let report = runtime()?.block_on(client.export(force))?;
    emit(&report)
}

fn ledger(mut ledger: Ledger, command: LedgerCommand) -> Outcome {
    match command {
        LedgerCommand::AddDataset { id, root } => {
            let root = fs::canonicalize(&root).map_err(|e| Failure::io(&root, e))?;
            ledger.register_dataset(&id, &root)?;
            emit(&json!({"id": id, "root": root}))
        }
        LedgerCommand::Record(args) => record(&mut ledger, args),
        LedgerCommand::Show { iteration: None } => emit(ledger.manifest()),
        LedgerCommand::Show {
            iteration: Some(id),
        } => match ledger.get(&id) {
            Some(r) => emit(r),
            None => Err(Failure::invalid(format!("unknown iteration `{id}`"))),
        },
        LedgerCommand::Compare { iterations, format } => {
            let ids: Vec<&str> = iterations.iter().map(String::as_str).collect();
            let table = ledger.compare(&ids)?;
            match format {
                Format::Json => emit(&table),
                Format::Csv => {
                    print!("{}", table.to_csv());
                    Ok(())
                }
            }
        }
        LedgerCommand::Lineage { iteration } => emit(&ledger.lineage(&iteration)?),
    }
}

fn record(ledger: &mut Ledger, args: RecordArgs) -> Outcome {
    let mut parts = Vec::new();
    for id in &args.datasets {
        let ds = ledger.dataset(id).ok_or_else(|| {
            Failure::invalid(format!(
                "unknown dataset `{id}`; register it with `ledger add-dataset`"
            ))
        })?;
        parts.push((id.clone(), load_index(&ds.root, false)?));
    }
    let merged = DatasetIndex::merge_prefixed(parts.iter().map(|(id, idx)| (id.as_str(), idx)))?;
    let metrics = match &args.metrics {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
            Some(
                serde_json::from_str::<MetricsSummary>(&text)
                    .map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let mut series = BTreeMap::new();
    for (name, path) in &args.series {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let points = parse_series_csv(&text)
            .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        if series.insert(name.clone(), points).is_some() {
            return Err(Failure::invalid(format!("series `{name}` given twice")));
        }
    }
    let config = IterationConfig {
        iteration_id: args.iteration,
        input_side: args.input_side,
        batch_size: args.batch_size,
        split_ratio: args.ratio,
        split_seed: args.seed,
        parent_weights: args.parent_weights,
        parent_iteration: args.parent_iteration,
        dataset_sources: args.datasets,
        stratified: args.stratified,
    };
    emit(ledger.record_iteration(config, &merged, metrics, series)?)
}
