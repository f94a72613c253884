use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nariqa_core::config::RunConfig;
use nariqa_core::corpus::{
    load_frames, load_scenes, read_manifest, score_triplets, supervision_filter, write_manifest, Manifest,
    ManifestHeader, Resolver, ScoreTable, Scenes,
};
use nariqa_core::distort::{apply_distortion, apply_masked, catalog_list, DistortionSpec};
use nariqa_core::embed::{
    embed_image, head_forward, image_embedding, patch_features, write_embeddings, Embedding, EmbeddingHead,
    EmbeddingSet,
};
use nariqa_core::evalkit::{flip_rate, plcc, read_dmos, srcc, two_afc_accuracy, Correlations, EvalReport};
use nariqa_core::flowtroi::{
    estimate_flow_with, feather_mask, flow_magnitude, load_flow, save_flow, troi_from_flow, TroiMask,
};
use nariqa_core::imagecore::{load_image, save_image};
use nariqa_core::pipeline::{checkpoint_name, record_samples, run_pipeline, synth_scenes, with_jobs, write_scenes};
use nariqa_core::rng::hash_str;
use nariqa_core::score::{patch_mismatch_heatmap, quality_score, two_afc_decide, Decision, ReferenceKind};
use nariqa_core::train::{read_checkpoint, train_loop_with, write_checkpoint, write_loss_log, TrainerState};
use nariqa_core::{selftest, Image, PatchGrid};
use nariqa_study::images::ImageStore;
use nariqa_study::server::{router, serve, ServerOptions};
use nariqa_study::StudyState;
use thiserror::Error;

use crate::args::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] nariqa_core::Error),
    #[error(transparent)]
    Study(#[from] nariqa_study::StudyError),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn base_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None if g.toy => RunConfig::toy(),
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

/// Validates the final configuration and writes its snapshot into `dir`.
fn commit(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    cfg.write_snapshot(dir)?;
    Ok(())
}

fn parent_of(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn require(flag: Option<&PathBuf>, from_config: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(from_config)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("no {name} given (use --{name} or set paths.{name} in the config)")))
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf()))
}

/// Scene directory as stored in a manifest written to `manifest_dir`.
fn scene_dir_for(scene_dir: &Path, manifest_dir: &Path) -> String {
    let (s, m) = (absolute(scene_dir), absolute(manifest_dir));
    let (sc, mc): (Vec<_>, Vec<_>) = (s.components().collect(), m.components().collect());
    let common = sc.iter().zip(&mc).take_while(|(a, b)| a == b).count();
    if common == 0 {
        return s.display().to_string();
    }
    let mut rel = PathBuf::new();
    for _ in common..mc.len() {
        rel.push("..");
    }
    for c in &sc[common..] {
        rel.push(c);
    }
    if rel.as_os_str().is_empty() {
        ".".into()
    } else {
        rel.display().to_string()
    }
}

/// Rewrites relative scene directories of a manifest moved from `from` to `to`.
fn rebase_scenes(header: &mut ManifestHeader, from: &Path, to: &Path) {
    if absolute(from) == absolute(to) {
        return;
    }
    for dir in header.scenes.values_mut() {
        let p = Path::new(dir.as_str());
        let full = if p.is_relative() { from.join(p) } else { p.to_path_buf() };
        *dir = scene_dir_for(&full, to);
    }
}

fn load_study_manifest(path: &Path) -> Result<(Manifest, Scenes)> {
    let m = read_manifest(path)?;
    let scenes = load_scenes(&m.header, &parent_of(path))?;
    Ok((m, scenes))
}

fn load_head(path: Option<&PathBuf>, cfg: &RunConfig) -> Result<(EmbeddingHead, String)> {
    match path.or(cfg.paths.checkpoints.as_ref()) {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            let id = p.file_stem().map_or_else(|| "head".into(), |s| s.to_string_lossy().into_owned());
            Ok((ck.head, id))
        }
        None => Ok((TrainerState::init(&cfg.trainer())?.head, "initial-head".into())),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::create_dir_all(parent_of(path)).map_err(io(path))?;
    std::fs::write(path, bytes).map_err(io(path))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = base_config(&cli.global)?;
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Flow(a) => flow(cfg, a),
        Command::Troi(a) => troi(cfg, a),
        Command::Distort(a) => distort(cfg, a),
        Command::Triplets(TripletsCommand::Build(a)) => build(cfg, a),
        Command::Triplets(TripletsCommand::Filter(a)) => filter(cfg, a),
        Command::Embed(a) => embed(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Score(a) => score(cfg, a),
        Command::Heatmap(a) => heatmap(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Study(StudyCommand::Serve(a)) => study_serve(cfg, a),
        Command::Study(StudyCommand::Export(a)) => study_export(cfg, a),
        Command::Selftest(a) => run_selftest(cfg, a),
        Command::Pipeline(a) => pipeline(cfg, a),
    }
}

fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    s.scenes = a.scenes.unwrap_or(s.scenes);
    s.frames = a.frames.unwrap_or(s.frames);
    s.width = a.width.unwrap_or(s.width);
    s.height = a.height.unwrap_or(s.height);
    commit(&cfg, &a.out)?;
    let dirs = with_jobs(cfg.jobs, || write_scenes(&synth_scenes(&cfg), &a.out))??;
    println!("wrote {} scenes of {} frames to {}", dirs.len(), cfg.synth.frames, a.out.display());
    Ok(())
}

fn flow(cfg: RunConfig, a: FlowArgs) -> Result<()> {
    commit(&cfg, &parent_of(&a.out))?;
    let f = estimate_flow_with(&load_image(&a.prev)?, &load_image(&a.curr)?, &cfg.flow)?;
    save_flow(&f, &a.out)?;
    let mag = flow_magnitude(&f);
    let mean = mag.data.iter().map(|&v| f64::from(v)).sum::<f64>() / mag.data.len().max(1) as f64;
    println!("flow {}x{} mean magnitude {mean:.3} -> {}", f.width, f.height, a.out.display());
    Ok(())
}

fn troi(cfg: RunConfig, a: TroiArgs) -> Result<()> {
    commit(&cfg, &parent_of(&a.out))?;
    let field = match (&a.flow, &a.prev, &a.curr) {
        (Some(f), _, _) => load_flow(f)?,
        (None, Some(p), Some(c)) => estimate_flow_with(&load_image(p)?, &load_image(c)?, &cfg.flow)?,
        _ => return Err(CliError::Usage("give --flow or both --prev and --curr".into())),
    };
    let mask = troi_from_flow(&flow_magnitude(&field), a.coverage, &cfg.troi)?;
    write_file(&a.out, mask.to_png()?)?;
    println!(
        "selected {} px, coverage {:.4} after cleanup -> {}",
        mask.selected,
        mask.coverage,
        a.out.display()
    );
    Ok(())
}

fn distort(cfg: RunConfig, a: DistortArgs) -> Result<()> {
    if a.list {
        for e in &catalog_list().entries {
            println!("{:<28} {:<12} {}", e.type_id, e.category, if e.stochastic { "stochastic" } else { "" });
        }
        return Ok(());
    }
    let (Some(input), Some(type_id), Some(level), Some(out)) = (&a.input, &a.type_id, a.level, &a.out) else {
        return Err(CliError::Usage("--input, --type, --level and --out are required".into()));
    };
    commit(&cfg, &parent_of(out))?;
    let img = load_image(input)?;
    let spec = DistortionSpec::new(type_id, level, cfg.stage_seed("distort"))?;
    let mask = match (&a.mask, a.coverage, &a.prev) {
        (Some(m), _, _) => Some(TroiMask::load_png(m)?),
        (None, Some(c), Some(p)) => {
            let f = estimate_flow_with(&load_image(p)?, &img, &cfg.flow)?;
            Some(troi_from_flow(&flow_magnitude(&f), c, &cfg.troi)?)
        }
        _ => None,
    };
    let result = match mask {
        Some(m) => apply_masked(&img, &spec, &feather_mask(&m, cfg.troi.feather_sigma))?,
        None => apply_distortion(&img, &spec)?,
    };
    save_image(&result, out)?;
    println!("{type_id} level {level} -> {}", out.display());
    Ok(())
}

fn build(mut cfg: RunConfig, a: BuildArgs) -> Result<()> {
    let frames = require(a.frames.as_ref(), cfg.paths.frames.as_ref(), "frames")?;
    cfg.paths.frames = Some(frames.clone());
    cfg.paths.manifest = Some(a.out.clone());
    let out_dir = parent_of(&a.out);
    commit(&cfg, &out_dir)?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&frames)
        .map_err(io(&frames))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Failed(format!("{} contains no scene directories", frames.display())));
    }
    let (manifest, stats) = with_jobs(cfg.jobs, || -> Result<_> {
        let mut scenes = Scenes::new();
        for d in &dirs {
            let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            scenes.insert(id, load_frames(d)?);
        }
        let (mut m, stats) = nariqa_core::pipeline::build_corpus(&cfg, &scenes)?;
        for (id, dir) in m.header.scenes.iter_mut() {
            *dir = scene_dir_for(&frames.join(id.as_str()), &out_dir);
        }
        Ok((m, stats))
    })??;
    write_manifest(&manifest, &a.out)?;
    println!("emitted {} triplets ({} skipped) -> {}", stats.emitted, stats.skipped, a.out.display());
    Ok(())
}

fn filter(mut cfg: RunConfig, a: FilterArgs) -> Result<()> {
    let manifest_path = require(a.manifest.as_ref(), cfg.paths.manifest.as_ref(), "manifest")?;
    if let Some(t) = &a.tau {
        cfg.filter.tau = [t[0], t[1]];
    }
    let out_dir = parent_of(&a.out);
    let scores_path = a.scores.clone().or(cfg.paths.scores.clone());
    cfg.paths.manifest = Some(manifest_path.clone());
    commit(&cfg, &out_dir)?;
    let m = read_manifest(&manifest_path)?;
    let table = match &scores_path {
        Some(p) if p.exists() => ScoreTable::read_csv(p)?,
        _ => {
            let scenes = load_scenes(&m.header, &parent_of(&manifest_path))?;
            let t = with_jobs(cfg.jobs, || -> Result<_> {
                let mut r = Resolver::new(&scenes, &m.header);
                r.prepare(&m.records)?;
                Ok(score_triplets(&m.records, &r)?)
            })??;
            let p = scores_path.unwrap_or_else(|| out_dir.join("scores.csv"));
            t.write_csv(&p)?;
            t
        }
    };
    let f = &cfg.filter;
    let (mut out, stats) = supervision_filter(&m, &table, (&f.scorers[0], &f.scorers[1]), (f.tau[0], f.tau[1]))?;
    rebase_scenes(&mut out.header, &parent_of(&manifest_path), &out_dir);
    write_manifest(&out, &a.out)?;
    println!(
        "kept {} / dropped {} ambiguous, {} disagreeing -> {}",
        stats.kept,
        stats.dropped_ambiguous,
        stats.dropped_disagreement,
        a.out.display()
    );
    Ok(())
}

fn embed(cfg: RunConfig, a: EmbedArgs) -> Result<()> {
    commit(&cfg, &parent_of(&a.out))?;
    let (head, _) = load_head(a.head.as_ref(), &cfg)?;
    let img = load_image(&a.input)?;
    let patch = cfg.train.patch_size;
    let set = if a.patches {
        let grid = PatchGrid::for_image(&img, patch)?;
        EmbeddingSet::from_patches(&head_forward(&patch_features(&img, &grid)?, &head)?)?
    } else {
        EmbeddingSet::from_embeddings(&[embed_image(&img, &head, patch)?])?
    };
    write_embeddings(&set, &a.out)?;
    println!("{} embedding(s) of dim {} -> {}", set.count, set.dim, a.out.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let manifest_path = require(a.manifest.as_ref(), cfg.paths.manifest.as_ref(), "manifest")?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.paths.manifest = Some(manifest_path.clone());
    // Fail on a missing manifest before anything is written.
    let (m, scenes) = load_study_manifest(&manifest_path)?;
    commit(&cfg, &a.out)?;
    let ck_dir = a.out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(io(&ck_dir))?;
    let tcfg = cfg.trainer();
    let keep = tcfg.keep_checkpoints.max(1);
    let result = with_jobs(cfg.jobs, || -> Result<_> {
        let mut r = Resolver::new(&scenes, &m.header);
        r.prepare(&m.records)?;
        let samples = record_samples(&m.records, &r, tcfg.patch_size)?;
        Ok(train_loop_with(&samples, &tcfg, |ck| {
            write_checkpoint(&ck.stored()?, ck_dir.join(checkpoint_name(ck.epoch)))?;
            if ck.epoch >= keep {
                let old = ck_dir.join(checkpoint_name(ck.epoch - keep));
                std::fs::remove_file(&old).map_err(|e| nariqa_core::Error::Io { path: old, source: e })?;
            }
            Ok(())
        })?)
    })??;
    write_loss_log(&result.log, a.out.join("loss_log.csv"))?;
    let last = result.log.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} epochs on {} triplets, final batch loss {last:.6} -> {}",
        tcfg.epochs,
        m.records.len(),
        ck_dir.display()
    );
    Ok(())
}

fn kind_of(k: KindArg) -> ReferenceKind {
    match k {
        KindArg::Aligned => ReferenceKind::Aligned,
        KindArg::NonAligned => ReferenceKind::NonAligned,
    }
}

fn score(cfg: RunConfig, a: ScoreArgs) -> Result<()> {
    cfg.validate()?;
    let (head, _) = load_head(a.head.as_ref(), &cfg)?;
    let p = cfg.train.patch_size;
    let r = embed_image(&load_image(&a.reference)?, &head, p)?;
    let t = embed_image(&load_image(&a.test)?, &head, p)?;
    let q = quality_score(&r, &t, kind_of(a.kind))?;
    println!("{}", serde_json::to_string(&q).map_err(|e| CliError::Failed(e.to_string()))?);
    Ok(())
}

fn heatmap(mut cfg: RunConfig, a: HeatmapArgs) -> Result<()> {
    if let Some(b) = a.beta {
        cfg.score.beta = b;
    }
    commit(&cfg, &a.out)?;
    let (head, _) = load_head(a.head.as_ref(), &cfg)?;
    let patches = |img: &Image| -> Result<_> {
        let grid = PatchGrid::for_image(img, cfg.train.patch_size)?;
        Ok(head_forward(&patch_features(img, &grid)?, &head)?)
    };
    let ra = patches(&load_image(&a.reference)?)?;
    let pb = patches(&load_image(&a.processed)?)?;
    let hm = patch_mismatch_heatmap(&ra, &pb, cfg.score.beta, cfg.score.eps)?;
    write_file(&a.out.join("heatmap.png"), hm.processed_png(a.scale)?)?;
    write_file(&a.out.join("heatmap.csv"), hm.to_csv())?;
    let peak = hm.processed.iter().cloned().fold(0.0, f64::max);
    println!("{} processed patches, peak {peak:.4} -> {}", hm.processed.len(), a.out.display());
    Ok(())
}

fn correlations(
    dmos: &BTreeMap<String, f64>,
    index: &BTreeMap<&str, usize>,
    embs: &[[Embedding; 4]],
    kind: ReferenceKind,
) -> Result<Correlations> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (item, &d) in dmos {
        let (tid, slot) = match item.rsplit_once('/') {
            Some((t, "pos")) => (t, 2),
            Some((t, "neg")) => (t, 3),
            _ => (item.as_str(), 2),
        };
        let &i = index
            .get(tid)
            .ok_or_else(|| CliError::Failed(format!("DMOS item `{item}` is not in the manifest")))?;
        let reference = &embs[i][if kind == ReferenceKind::Aligned { 0 } else { 1 }];
        x.push(quality_score(reference, &embs[i][slot], kind)?.value);
        y.push(d);
    }
    Ok(Correlations {
        plcc: plcc(&x, &y)?,
        srcc: srcc(&x, &y)?,
        n: x.len(),
    })
}

fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let manifest_path = require(a.manifest.as_ref(), cfg.paths.manifest.as_ref(), "manifest")?;
    cfg.paths.manifest = Some(manifest_path.clone());
    let (m, scenes) = load_study_manifest(&manifest_path)?;
    commit(&cfg, &a.out)?;
    let (head, model_id) = load_head(a.head.as_ref(), &cfg)?;
    let dmos = a.dmos.as_ref().map(read_dmos).transpose()?;
    let embs: Vec<[Embedding; 4]> = with_jobs(cfg.jobs, || -> Result<_> {
        let mut r = Resolver::new(&scenes, &m.header);
        r.prepare(&m.records)?;
        let samples = record_samples(&m.records, &r, cfg.train.patch_size)?;
        samples
            .iter()
            .map(|s| {
                let e = |k: usize| image_embedding(&head_forward(&s.feats[k], &head)?);
                Ok([e(0)?, e(1)?, e(2)?, e(3)?])
            })
            .collect()
    })??;
    let labels: Vec<u8> = m.records.iter().map(|r| r.label.unwrap_or(0)).collect();
    let scene_ids: Vec<String> = m.records.iter().map(|r| r.scene_id.clone()).collect();
    let decide = |slot: usize| -> Result<Vec<Decision>> {
        Ok(embs.iter().map(|e| two_afc_decide(&e[slot], &e[2], &e[3])).collect::<Result<_, _>>()?)
    };
    let (al, na) = (decide(0)?, decide(1)?);
    let choices = |d: &[Decision]| d.iter().map(|x| x.choice).collect::<Vec<_>>();
    let flips = flip_rate(&choices(&al), &choices(&na))?;
    let text = std::fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
    let manifest_id = format!("{:016x}", hash_str(&text));
    let index: BTreeMap<&str, usize> = m.records.iter().enumerate().map(|(i, r)| (r.triplet_id.as_str(), i)).collect();
    let mut table = String::new();
    for (kind, decisions, name) in [
        (ReferenceKind::Aligned, &al, "eval_aligned.json"),
        (ReferenceKind::NonAligned, &na, "eval_non_aligned.json"),
    ] {
        let report = EvalReport {
            model_id: model_id.clone(),
            manifest_id: manifest_id.clone(),
            reference_kind: kind,
            accuracy: two_afc_accuracy(decisions, &labels, &scene_ids)?,
            correlations: dmos.as_ref().map(|d| correlations(d, &index, &embs, kind)).transpose()?,
            flip_rate: Some(flips),
            epoch_window: None,
        };
        write_file(&a.out.join(name), report.to_json()?)?;
        table.push_str(&report.to_table());
        table.push('\n');
    }
    write_file(&a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn study_inputs(cfg: &mut RunConfig, s: &StudyShared) -> Result<(PathBuf, PathBuf)> {
    let manifest = require(s.manifest.as_ref(), cfg.paths.manifest.as_ref(), "manifest")?;
    if let Some(n) = s.min_raters {
        cfg.study.min_raters = n;
    }
    if let Some(t) = s.theta {
        cfg.study.theta = t;
    }
    cfg.validate()?;
    let votes = s.votes.clone().unwrap_or_else(|| manifest.with_extension("votes.jsonl"));
    Ok((manifest, votes))
}

fn study_serve(mut cfg: RunConfig, a: ServeArgs) -> Result<()> {
    let (manifest_path, votes) = study_inputs(&mut cfg, &a.shared)?;
    let (m, scenes) = load_study_manifest(&manifest_path)?;
    let header = m.header.clone();
    let state = StudyState::open(m, cfg.study, cfg.stage_seed("study"), &votes)?;
    let app = router(
        state,
        ImageStore::new(scenes, header),
        ServerOptions {
            show_aligned: a.show_aligned,
            static_dir: a.ui.clone(),
        },
    );
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(format!("runtime: {e}")))?;
    let addr = format!("{}:{}", a.host, a.port);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Failed(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Failed(e.to_string()))?;
        println!("study on http://{local} (votes: {})", votes.display());
        serve(listener, app).await.map_err(|e| CliError::Failed(format!("server: {e}")))
    })
}

fn study_export(mut cfg: RunConfig, a: ExportArgs) -> Result<()> {
    let (manifest_path, votes) = study_inputs(&mut cfg, &a.shared)?;
    if !votes.exists() {
        return Err(CliError::Failed(format!("vote log {} does not exist", votes.display())));
    }
    let mut m = read_manifest(&manifest_path)?;
    rebase_scenes(&mut m.header, &parent_of(&manifest_path), &parent_of(&a.out));
    commit(&cfg, &parent_of(&a.out))?;
    let state = StudyState::open(m, cfg.study, cfg.stage_seed("study"), &votes)?;
    let s = state.export_labels(&a.out)?;
    println!(
        "{} labeled, {} excluded, {} pending -> {} (tallies {})",
        s.labeled,
        s.excluded,
        s.pending,
        s.manifest.display(),
        s.tallies.display()
    );
    Ok(())
}

fn run_selftest(cfg: RunConfig, a: SelftestArgs) -> Result<()> {
    let outcomes = with_jobs(cfg.jobs, selftest::run_all)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&outcomes).map_err(|e| CliError::Failed(e.to_string()))?);
    } else {
        for o in &outcomes {
            println!("{} {}: {} ({:.2}s)", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail, o.seconds);
        }
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} of {} checks failed", outcomes.len())));
    }
    Ok(())
}

fn pipeline(mut cfg: RunConfig, a: PipelineArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let report = run_pipeline(&cfg, Some(&a.out))?;
    print!("{}", report.to_table());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_dirs_are_stored_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("frames/s0")).unwrap();
        std::fs::create_dir_all(root.join("out/deep")).unwrap();
        assert_eq!(scene_dir_for(&root.join("frames/s0"), root), "frames/s0");
        assert_eq!(scene_dir_for(&root.join("frames/s0"), &root.join("out/deep")), "../../frames/s0");
        assert_eq!(scene_dir_for(root, root), ".");
    }

    #[test]
    fn rebasing_keeps_scenes_reachable() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("a/frames/s")).unwrap();
        std::fs::create_dir_all(root.join("b")).unwrap();
        let mut h = ManifestHeader::new(
            0,
            Default::default(),
            Default::default(),
            Default::default(),
        );
        h.scenes.insert("s".into(), "frames/s".into());
        rebase_scenes(&mut h, &root.join("a"), &root.join("b"));
        assert_eq!(h.scenes["s"], "../a/frames/s");
        assert!(root.join("b").join(&h.scenes["s"]).is_dir());
    }

    #[test]
    fn usage_errors_map_to_exit_2() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Failed("x".into()).exit_code(), 1);
    }
}
