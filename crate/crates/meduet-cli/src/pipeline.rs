//! Subcommand bodies: thin sequential orchestration over the library. Each
//! command resolves the config, refuses output directories stamped by a
//! different config, does its work, and stamps the directory it wrote.
//!
//! Default paths hang off `--root`; the latent and code caches move to
//! `$MEDUET_CACHE` when set. Missing inputs surface as exit code 3 with the
//! producing subcommand named.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use meduet_core::codes::{extract_codes, read_codes, write_codes, FactorCode};
use meduet_core::config::{check_stamp, resolve_file, stamp, Resolved};
use meduet_core::corpus::{
    build_corpus, load_manifest, read_volume, write_volume, CorpusManifest, Volume,
    VolumeSidecar, MANIFEST_FILE,
};
use meduet_core::diffusion::{
    ddpm_schedule, load_denoiser, sample_latent, save_denoiser, train_denoiser, GuidanceConfig,
};
use meduet_core::evals::{
    export_embeddings, linear_probe, mmd_proxy, run_consistency_sweep, silhouette, ProbeReport,
    StyleDonor, SweepGrid, SweepRef,
};
use meduet_core::finetune::{
    finetune_classification, finetune_segmentation, load_seg_data, SegModel,
};
use meduet_core::model::{patchify, Model, ModelDims};
use meduet_core::tokenizer::{
    read_latent, rows_to_cube, tokenize_corpus, train_tokenizer, DeterministicTokenizer,
    LatentSidecar, LatentVolume, Tokenizer, TokenizerMode,
};
use meduet_core::trainer::{load_train_data, Ablation, Trainer, CHECKPOINT_META};
use meduet_core::{Error, Result};

use crate::{
    AugmentTrainArgs, Cmd, CodesArgs, Common, CorpusArgs, ExportArgs, MmdArgs, PretrainArgs,
    ProbeArgs, SampleArgs, SweepArgs, Task, TokenizeArgs,
};

const TOKENIZER_FILE: &str = "tokenizer.mdar";

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Corpus(a) => corpus(a),
        Cmd::Tokenize(a) => tokenize(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Codes(a) => codes(a),
        Cmd::Sample(a) => sample(a),
        Cmd::AugmentTrain(a) => augment_train(a),
        Cmd::Probe(a) => probe(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Mmd(a) => mmd(a),
        Cmd::Export(a) => export(a),
    }
}

// ---- shared plumbing ----

/// Where default paths live. The cache holds artifacts keyed by content
/// (latents, codes) and is shareable across workspaces via `MEDUET_CACHE`.
struct Workspace {
    root: PathBuf,
    cache: PathBuf,
}

impl Workspace {
    fn new(root: &Path) -> Self {
        let cache = env::var_os("MEDUET_CACHE")
            .map(PathBuf::from)
            .unwrap_or_else(|| root.join("cache"));
        Self { root: root.to_path_buf(), cache }
    }

    fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn latents_dir(&self) -> PathBuf {
        self.cache.join("latents")
    }

    fn codes_file(&self) -> PathBuf {
        self.cache.join("codes").join("codes.jsonl")
    }

    fn pretrain_dir(&self, ablation: &Ablation) -> PathBuf {
        self.root.join(format!("pretrain{}", ablation_suffix(ablation)))
    }

    fn denoiser_dir(&self, warm_start: bool) -> PathBuf {
        self.root
            .join(if warm_start { "denoiser" } else { "denoiser-scratch" })
    }

    fn finetune_dir(&self, task: Task, from_scratch: bool) -> PathBuf {
        self.root.join(format!(
            "finetune-{}{}",
            task_name(task),
            if from_scratch { "-scratch" } else { "" }
        ))
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Seg => "seg",
        Task::Cls => "cls",
    }
}

/// Ablated checkpoints get their own default directory so they never clobber
/// the full run. Flag order is fixed, so the name is canonical.
fn ablation_suffix(a: &Ablation) -> String {
    let mut parts = Vec::new();
    if a.no_ld {
        parts.push("no_ld");
    }
    if a.no_mftd {
        parts.push("no_mftd");
    }
    if a.no_siqc {
        parts.push("no_siqc");
    }
    if a.no_disent {
        parts.push("no_disent");
    }
    if a.no_demix {
        parts.push("no_demix");
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!("-{}", parts.join("-"))
    }
}

/// Resolves the config with flag sugar appended after `--set` overrides (so
/// the dedicated flags win), and handles `--dry-run` before any file I/O.
/// `None` means the dry run already printed and the command is done.
fn prepare(common: &Common, sugar: Vec<String>) -> Result<Option<(Resolved, Workspace)>> {
    let mut overrides = common.set.clone();
    overrides.extend(sugar);
    let resolved = resolve_file(common.config.as_deref(), &overrides)?;
    if common.dry_run {
        print!("{}", resolved.config.to_toml_string());
        println!("# hash: {}", resolved.hash);
        return Ok(None);
    }
    Ok(Some((resolved, Workspace::new(&common.root))))
}

/// Accepts either the corpus directory or the manifest file inside it.
fn manifest_dir(p: PathBuf) -> PathBuf {
    if p.extension().map_or(false, |e| e == "json") {
        p.parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    } else {
        p
    }
}

fn load_manifest_at(dir: &Path) -> Result<CorpusManifest> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no corpus manifest in {}; run `meduet corpus` first",
            dir.display()
        )));
    }
    load_manifest(dir)
}

fn load_tokenizer_at(dir: &Path) -> Result<Tokenizer> {
    let path = dir.join(TOKENIZER_FILE);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no tokenizer at {}; run `meduet tokenize` first",
            path.display()
        )));
    }
    Tokenizer::load(&path)
}

fn read_latent_at(dir: &Path, stem: &str) -> Result<(LatentVolume, LatentSidecar)> {
    read_latent(dir, stem).map_err(|e| match e {
        Error::Io(_) => Error::MissingPrerequisite(format!(
            "no cached latent for '{}' in {}; run `meduet tokenize` first",
            stem,
            dir.display()
        )),
        other => other,
    })
}

fn load_checkpoint_at(dir: &Path) -> Result<Trainer> {
    if !dir.join(CHECKPOINT_META).exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no checkpoint in {}; run `meduet pretrain` first",
            dir.display()
        )));
    }
    Trainer::load_checkpoint(dir)
}

fn read_codes_at(path: &Path) -> Result<Vec<FactorCode>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no factor codes at {}; run `meduet codes` first",
            path.display()
        )));
    }
    let codes = read_codes(path)?;
    if codes.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "{} holds no codes; re-run `meduet codes`",
            path.display()
        )));
    }
    Ok(codes)
}

fn check_dims(config_dims: &ModelDims, artifact_dims: &ModelDims, what: &str) -> Result<()> {
    if config_dims != artifact_dims {
        return Err(Error::Config(format!(
            "{} was built with a different model geometry than the current config resolves to; \
             point --config/--set at the settings that produced it",
            what
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ---- subcommands ----

fn corpus(args: CorpusArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let out_dir = args.out.unwrap_or_else(|| ws.corpus_dir());
    check_stamp(&out_dir, &resolved, args.common.force)?;
    let manifest = build_corpus(&resolved.config.corpus, &out_dir)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "wrote {} volumes (side {}, {} domains) to {}",
        manifest.entries.len(),
        manifest.side,
        manifest.n_domains,
        out_dir.display()
    );
    Ok(())
}

fn tokenize(args: TokenizeArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let corpus_dir = manifest_dir(args.corpus.unwrap_or_else(|| ws.corpus_dir()));
    let manifest = load_manifest_at(&corpus_dir)?;
    let out_dir = args.out.unwrap_or_else(|| ws.latents_dir());
    check_stamp(&out_dir, &resolved, args.common.force)?;

    let mut volumes = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        volumes.push(read_volume(&corpus_dir, &entry.stem)?.0);
    }
    let tok = match cfg.tokenizer.mode {
        TokenizerMode::Deterministic => {
            let refs: Vec<&Volume> = volumes.iter().collect();
            Tokenizer::Deterministic(DeterministicTokenizer::calibrate(cfg.tokenizer.block, &refs))
        }
        TokenizerMode::Learned => Tokenizer::Learned(train_tokenizer(&cfg.tokenizer, &volumes)?),
    };
    fs::create_dir_all(&out_dir)?;
    tok.save(&out_dir.join(TOKENIZER_FILE))?;
    tokenize_corpus(&tok, &manifest, &corpus_dir, &out_dir)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "tokenized {} volumes into {} (tokenizer {})",
        manifest.entries.len(),
        out_dir.display(),
        &tok.content_hash()[..12]
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let sugar = args
        .ablate
        .iter()
        .map(|name| format!("train.ablation.{}=true", name.to_ascii_lowercase()))
        .collect();
    let Some((resolved, ws)) = prepare(&args.common, sugar)? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let corpus_dir = manifest_dir(args.corpus.unwrap_or_else(|| ws.corpus_dir()));
    let manifest = load_manifest_at(&corpus_dir)?;
    let lat_dir = args.latents.unwrap_or_else(|| ws.latents_dir());
    if !lat_dir.join(TOKENIZER_FILE).exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no latent cache at {}; run `meduet tokenize` first",
            lat_dir.display()
        )));
    }
    let dims = cfg.model_dims()?;
    let data = load_train_data(&manifest, &lat_dir, &dims)?;

    let out_dir = args
        .out
        .unwrap_or_else(|| ws.pretrain_dir(&cfg.train.ablation));
    check_stamp(&out_dir, &resolved, args.common.force)?;
    let mut trainer = if args.resume && out_dir.join(CHECKPOINT_META).exists() {
        let t = Trainer::load_checkpoint(&out_dir)?;
        check_dims(&dims, &t.dims, "the resume checkpoint")?;
        t
    } else {
        Trainer::new(dims, cfg.train.clone())?
    };
    let ckpt = trainer.run(&data, &out_dir)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "pretrained to step {} on {} volumes; checkpoint {}",
        trainer.step,
        data.tokens.len(),
        ckpt.display()
    );
    Ok(())
}

fn codes(args: CodesArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let ckpt_dir = args
        .checkpoint
        .unwrap_or_else(|| ws.pretrain_dir(&cfg.train.ablation));
    let trainer = load_checkpoint_at(&ckpt_dir)?;
    check_dims(&cfg.model_dims()?, &trainer.dims, "the checkpoint")?;
    let ckpt_tok_hash = trainer.tokenizer_hash.clone();
    let model = Model { dims: trainer.dims.clone(), params: trainer.student };

    let corpus_dir = manifest_dir(args.corpus.unwrap_or_else(|| ws.corpus_dir()));
    let manifest = load_manifest_at(&corpus_dir)?;
    let lat_dir = args.latents.unwrap_or_else(|| ws.latents_dir());
    let out_file = args.out.unwrap_or_else(|| ws.codes_file());
    let out_dir = match out_file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    check_stamp(&out_dir, &resolved, args.common.force)?;

    let mut codes = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let (lat, sidecar) = read_latent_at(&lat_dir, &entry.stem)?;
        if let Some(h) = &ckpt_tok_hash {
            if *h != sidecar.tokenizer_hash {
                return Err(Error::Config(format!(
                    "latent cache was written by tokenizer {} but the checkpoint trained on {}; \
                     re-run `meduet tokenize` and `meduet pretrain` against the same cache",
                    &sidecar.tokenizer_hash[..12],
                    &h[..12]
                )));
            }
        }
        codes.push(extract_codes(&model, &lat, &entry.stem, entry.domain_id)?);
    }
    fs::create_dir_all(&out_dir)?;
    write_codes(&out_file, &codes)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "extracted {} codes (d_c {}, d_s {}) to {}",
        codes.len(),
        model.dims.d_c,
        model.dims.d_s,
        out_file.display()
    );
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let mut sugar = Vec::new();
    if let Some(w) = args.wc {
        sugar.push(format!("diffusion.guidance.w_c={}", w));
    }
    if let Some(w) = args.ws {
        sugar.push(format!("diffusion.guidance.w_s={}", w));
    }
    if args.no_init {
        sugar.push("diffusion.warm_start=false".to_string());
    }
    let Some((resolved, ws)) = prepare(&args.common, sugar)? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let dims = cfg.model_dims()?;
    let lat_dir = args.latents.unwrap_or_else(|| ws.latents_dir());
    let codes_path = args.codes.unwrap_or_else(|| ws.codes_file());
    let all_codes = read_codes_at(&codes_path)?;
    let den_dir = args
        .checkpoint
        .unwrap_or_else(|| ws.denoiser_dir(cfg.diffusion.warm_start));
    let out_dir = args.out.unwrap_or_else(|| ws.root.join("samples"));
    check_stamp(&out_dir, &resolved, args.common.force)?;

    let (den, den_cfg) = match load_denoiser(&den_dir) {
        Ok(pair) => pair,
        Err(Error::MissingPrerequisite(_)) => {
            check_stamp(&den_dir, &resolved, args.common.force)?;
            let mut tokens = Vec::with_capacity(all_codes.len());
            for code in &all_codes {
                let (lat, _) = read_latent_at(&lat_dir, &code.volume)?;
                tokens.push(patchify(&lat, dims.patch));
            }
            let backbone_params;
            let warm = if cfg.diffusion.warm_start {
                let bdir = args
                    .backbone
                    .clone()
                    .unwrap_or_else(|| ws.pretrain_dir(&cfg.train.ablation));
                let trainer = load_checkpoint_at(&bdir)?;
                check_dims(&dims, &trainer.dims, "the warm-start checkpoint")?;
                backbone_params = trainer.student;
                Some(&backbone_params)
            } else {
                None
            };
            let (den, losses) = train_denoiser(&cfg.diffusion, &tokens, &all_codes, warm)?;
            save_denoiser(&den_dir, &den, &cfg.diffusion)?;
            stamp(&den_dir, &resolved)?;
            println!(
                "trained denoiser for {} steps (final loss {:.4}) into {}",
                cfg.diffusion.steps,
                losses.last().copied().unwrap_or(f64::NAN),
                den_dir.display()
            );
            (den, cfg.diffusion.clone())
        }
        Err(e) => return Err(e),
    };
    if den.dims.l != dims.l() || den.dims.patch_dim != dims.patch_dim() {
        return Err(Error::Config(format!(
            "denoiser in {} works on a {}x{} token grid but the config resolves to {}x{}",
            den_dir.display(),
            den.dims.l,
            den.dims.patch_dim,
            dims.l(),
            dims.patch_dim()
        )));
    }

    let find = |id: &str| {
        all_codes.iter().find(|c| c.volume == id).ok_or_else(|| {
            Error::Config(format!("no code for volume '{}' in {}", id, codes_path.display()))
        })
    };
    let content = match &args.content_from {
        Some(id) => find(id)?,
        None => &all_codes[0],
    };
    let style = match &args.style_from {
        Some(id) => find(id)?,
        None => all_codes
            .iter()
            .find(|c| c.domain_id != content.domain_id)
            .ok_or_else(|| {
                Error::Config(
                    "every code shares the content volume's domain; pass --style-from".into(),
                )
            })?,
    };

    let tok = load_tokenizer_at(&lat_dir)?;
    // Geometry rides along in the sidecar so downstream masks can be rebuilt.
    let corpus_dir = manifest_dir(args.corpus.unwrap_or_else(|| ws.corpus_dir()));
    let (_, ref_sidecar) = read_volume(&corpus_dir, &content.volume)?;

    // t_steps and betas must match what the denoiser trained with; only the
    // guidance weights and step count are free at sampling time.
    let guidance = GuidanceConfig {
        w_c: cfg.diffusion.guidance.w_c,
        w_s: cfg.diffusion.guidance.w_s,
        sample_steps: cfg.diffusion.guidance.sample_steps,
        ..den_cfg.guidance
    };
    let schedule = ddpm_schedule(den_cfg.guidance.t_steps, den_cfg.beta_start, den_cfg.beta_end);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.diffusion.seed);
    fs::create_dir_all(&out_dir)?;
    for i in 0..args.n {
        let rows = sample_latent(&den, &guidance, &schedule, &content.c0, &style.s0, &mut rng)?;
        let lat = LatentVolume {
            channels: dims.c_lat,
            side: dims.latent_side,
            data: rows_to_cube(&rows.view(), dims.c_lat, dims.latent_side, dims.patch),
        };
        let vol = tok.decode(&lat);
        let sidecar = VolumeSidecar {
            shape: [vol.side; 3],
            dtype: "f32-le".to_string(),
            domain_id: style.domain_id,
            content_seed: ref_sidecar.content_seed,
            content: ref_sidecar.content.clone(),
        };
        write_volume(&out_dir, &format!("sample-{:03}", i), &vol, &sidecar)?;
    }
    stamp(&out_dir, &resolved)?;
    println!(
        "wrote {} samples (content {}, style {}, w_c {}, w_s {}) to {}",
        args.n,
        content.volume,
        style.volume,
        guidance.w_c,
        guidance.w_s,
        out_dir.display()
    );
    Ok(())
}

fn augment_train(args: AugmentTrainArgs) -> Result<()> {
    let mut sugar = Vec::new();
    if let Some(budget) = &args.labels {
        sugar.push(format!("analysis.labels={}", budget));
    }
    if let Some(d) = args.target_domain {
        sugar.push(format!("analysis.target_domain={}", d));
    }
    if args.from_scratch {
        sugar.push("analysis.from_scratch=true".to_string());
    }
    let Some((resolved, ws)) = prepare(&args.common, sugar)? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let ckpt_dir = args
        .checkpoint
        .unwrap_or_else(|| ws.pretrain_dir(&cfg.train.ablation));
    let trainer = load_checkpoint_at(&ckpt_dir)?;
    check_dims(&cfg.model_dims()?, &trainer.dims, "the checkpoint")?;
    let model = Model { dims: trainer.dims.clone(), params: trainer.student };

    let corpus_dir = manifest_dir(args.corpus.unwrap_or_else(|| ws.corpus_dir()));
    let manifest = load_manifest_at(&corpus_dir)?;
    let lat_dir = args.latents.unwrap_or_else(|| ws.latents_dir());
    let data = load_seg_data(&manifest, &corpus_dir, &lat_dir, &model)?;

    let out_dir = args
        .out
        .unwrap_or_else(|| ws.finetune_dir(args.task, cfg.analysis.from_scratch));
    check_stamp(&out_dir, &resolved, args.common.force)?;
    fs::create_dir_all(&out_dir)?;
    match args.task {
        Task::Seg => {
            let (seg, report) = finetune_segmentation(&model, &data, &cfg.analysis)?;
            seg.save(&out_dir)?;
            write_json(&out_dir.join("report.json"), &report)?;
            println!(
                "segmentation: mean Dice {:.4} on {} held-out volumes ({} labeled, budget {}); \
                 head saved to {}",
                report.mean_dice,
                report.n_eval,
                report.n_labeled,
                report.labels,
                out_dir.display()
            );
        }
        Task::Cls => {
            let (_, report) = finetune_classification(&model, &data, &cfg.analysis)?;
            write_json(&out_dir.join("report.json"), &report)?;
            println!(
                "classification: accuracy {:.4} on {} held-out volumes ({} labeled, budget {})",
                report.accuracy, report.n_eval, report.n_labeled, report.labels
            );
        }
    }
    stamp(&out_dir, &resolved)?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeBundle {
    /// Domain probes: accuracy from the style factor should be high, from
    /// the content factor near chance.
    style: ProbeReport,
    content: ProbeReport,
    silhouette_style: f64,
    silhouette_content: f64,
    accuracy_gap: f64,
}

fn probe(args: ProbeArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let codes_path = args.codes.unwrap_or_else(|| ws.codes_file());
    let codes = read_codes_at(&codes_path)?;
    let (c, s, domains) = code_matrices(&codes)?;

    let style = linear_probe(&s, &domains, "style", cfg.eval.seed)?;
    let content = linear_probe(&c, &domains, "content", cfg.eval.seed)?;
    let bundle = ProbeBundle {
        accuracy_gap: style.accuracy - content.accuracy,
        silhouette_style: silhouette(&s, &domains)?,
        silhouette_content: silhouette(&c, &domains)?,
        style,
        content,
    };

    let out_dir = args.out.unwrap_or_else(|| ws.root.join("probe"));
    check_stamp(&out_dir, &resolved, args.common.force)?;
    fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("probe.json"), &bundle)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "domain probes: style {:.1}% / content {:.1}% (chance {:.1}%), gap {:.1} points; \
         report in {}",
        100.0 * bundle.style.accuracy,
        100.0 * bundle.content.accuracy,
        100.0 * bundle.style.chance,
        100.0 * bundle.accuracy_gap,
        out_dir.display()
    );
    Ok(())
}

fn code_matrices(codes: &[FactorCode]) -> Result<(Array2<f64>, Array2<f64>, Vec<usize>)> {
    let d_c = codes[0].c0.len();
    let d_s = codes[0].s0.len();
    let mut c = Array2::zeros((codes.len(), d_c));
    let mut s = Array2::zeros((codes.len(), d_s));
    let mut domains = Vec::with_capacity(codes.len());
    for (i, code) in codes.iter().enumerate() {
        if code.c0.len() != d_c || code.s0.len() != d_s {
            return Err(Error::Config(format!(
                "code for '{}' has inconsistent dimensions",
                code.volume
            )));
        }
        for (j, &v) in code.c0.iter().enumerate() {
            c[[i, j]] = v;
        }
        for (j, &v) in code.s0.iter().enumerate() {
            s[[i, j]] = v;
        }
        domains.push(code.domain_id);
    }
    Ok((c, s, domains))
}

fn sweep(args: SweepArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let cfg = &resolved.config;
    let ckpt_dir = args
        .checkpoint
        .unwrap_or_else(|| ws.pretrain_dir(&cfg.train.ablation));
    let trainer = load_checkpoint_at(&ckpt_dir)?;
    check_dims(&cfg.model_dims()?, &trainer.dims, "the checkpoint")?;
    let model = Model { dims: trainer.dims.clone(), params: trainer.student };

    let seg_dir = args.seg.unwrap_or_else(|| ws.finetune_dir(Task::Seg, false));
    let seg = SegModel::load(&seg_dir)?;
    let den_dir = args
        .denoiser
        .unwrap_or_else(|| ws.denoiser_dir(cfg.diffusion.warm_start));
    let (den, den_cfg) = load_denoiser(&den_dir).map_err(|e| match e {
        Error::MissingPrerequisite(_) => Error::MissingPrerequisite(format!(
            "no denoiser in {}; run `meduet sample` first (it trains and caches one)",
            den_dir.display()
        )),
        other => other,
    })?;

    let codes_path = args.codes.unwrap_or_else(|| ws.codes_file());
    let codes = read_codes_at(&codes_path)?;
    let lat_dir = args.latents.unwrap_or_else(|| ws.latents_dir());

    // References carry content from the lowest domain id; donors lend style
    // from every other domain.
    let ref_domain = codes.iter().map(|c| c.domain_id).min().unwrap_or(0);
    let mut refs = Vec::new();
    for code in codes.iter().filter(|c| c.domain_id == ref_domain) {
        if refs.len() == cfg.eval.sweep_refs {
            break;
        }
        let (lat, _) = read_latent_at(&lat_dir, &code.volume)?;
        refs.push(SweepRef {
            tokens: patchify(&lat, model.dims.patch),
            c_code: code.c0.clone(),
        });
    }
    let donors: Vec<StyleDonor> = codes
        .iter()
        .filter(|c| c.domain_id != ref_domain)
        .take(cfg.eval.sweep_donors)
        .map(|c| StyleDonor { s_code: c.s0.clone(), domain: c.domain_id })
        .collect();
    if refs.is_empty() || donors.is_empty() {
        return Err(Error::Config(
            "the sweep needs codes from at least two domains".into(),
        ));
    }

    let grid = SweepGrid { w_c: cfg.eval.w_c.clone(), w_s: cfg.eval.w_s.clone() };
    let schedule = ddpm_schedule(den_cfg.guidance.t_steps, den_cfg.beta_start, den_cfg.beta_end);
    let report = run_consistency_sweep(
        &model,
        &seg,
        &den,
        &den_cfg.guidance,
        &schedule,
        &refs,
        &donors,
        &grid,
        cfg.eval.seed,
    )?;

    let out_dir = args.out.unwrap_or_else(|| ws.root.join("sweep"));
    check_stamp(&out_dir, &resolved, args.common.force)?;
    fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("sweep.json"), &report)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "{} refs x {} donors per cell; report in {}",
        refs.len(),
        donors.len(),
        out_dir.display()
    );
    print_grid("R_D (content Dice)", &report.w_c, &report.w_s, &report.r_d);
    print_grid("R_C (style agreement)", &report.w_c, &report.w_s, &report.r_c);
    Ok(())
}

fn print_grid(label: &str, w_c: &[f64], w_s: &[f64], cells: &[Vec<f64>]) {
    let header: Vec<String> = w_s.iter().map(|w| format!("w_s={:<5}", w)).collect();
    println!("{}:", label);
    println!("  {:<9} {}", "", header.join(" "));
    for (i, row) in cells.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{:<8.3}", v)).collect();
        println!("  w_c={:<5} {}", w_c[i], vals.join(" "));
    }
}

#[derive(Serialize)]
struct MmdReport {
    value: f64,
    n_a: usize,
    n_b: usize,
    source_a: String,
    source_b: String,
}

fn mmd(args: MmdArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let corpus_dir = manifest_dir(args.corpus.unwrap_or_else(|| ws.corpus_dir()));
    let (a, source_a) = volume_set(&corpus_dir, args.domain_a, args.dir_a, "a")?;
    let (b, source_b) = volume_set(&corpus_dir, args.domain_b, args.dir_b, "b")?;
    let value = mmd_proxy(&a, &b)?;
    let report = MmdReport { value, n_a: a.len(), n_b: b.len(), source_a, source_b };

    let out_dir = args.out.unwrap_or_else(|| ws.root.join("mmd"));
    check_stamp(&out_dir, &resolved, args.common.force)?;
    fs::create_dir_all(&out_dir)?;
    write_json(&out_dir.join("mmd.json"), &report)?;
    stamp(&out_dir, &resolved)?;
    println!(
        "mmd^2 = {:.6} between {} ({} volumes) and {} ({} volumes); report in {}",
        report.value,
        report.source_a,
        report.n_a,
        report.source_b,
        report.n_b,
        out_dir.display()
    );
    Ok(())
}

/// One side of the comparison: a corpus domain or a directory of volume
/// files. Exactly one selector per side.
fn volume_set(
    corpus_dir: &Path,
    domain: Option<usize>,
    dir: Option<PathBuf>,
    side: &str,
) -> Result<(Vec<Volume>, String)> {
    match (domain, dir) {
        (Some(d), None) => {
            let manifest = load_manifest_at(corpus_dir)?;
            let mut vols = Vec::new();
            for entry in manifest.entries.iter().filter(|e| e.domain_id == d) {
                vols.push(read_volume(corpus_dir, &entry.stem)?.0);
            }
            if vols.is_empty() {
                return Err(Error::Config(format!("corpus has no volumes in domain {}", d)));
            }
            Ok((vols, format!("domain {}", d)))
        }
        (None, Some(p)) => {
            let stems = scan_volume_stems(&p)?;
            if stems.is_empty() {
                return Err(Error::MissingPrerequisite(format!(
                    "{} holds no volume files",
                    p.display()
                )));
            }
            let mut vols = Vec::new();
            for stem in &stems {
                vols.push(read_volume(&p, stem)?.0);
            }
            Ok((vols, p.display().to_string()))
        }
        _ => Err(Error::Config(format!(
            "pass exactly one of --domain-{} or --dir-{}",
            side, side
        ))),
    }
}

/// Volume files in a directory, by their stem. Latent caches share the raw
/// extension, so their dotted suffix is excluded.
fn scan_volume_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        Error::MissingPrerequisite(format!("{}: {}", dir.display(), e))
    })?;
    let mut stems = Vec::new();
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".f32") {
            if !stem.ends_with(".lat") {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn export(args: ExportArgs) -> Result<()> {
    let Some((resolved, ws)) = prepare(&args.common, Vec::new())? else {
        return Ok(());
    };
    let codes_path = args.codes.unwrap_or_else(|| ws.codes_file());
    let codes = read_codes_at(&codes_path)?;
    let out_dir = args.out.unwrap_or_else(|| ws.root.join("export"));
    check_stamp(&out_dir, &resolved, args.common.force)?;
    let out_file = out_dir.join("embeddings.jsonl");
    let n = export_embeddings(&codes, &out_file)?;
    stamp(&out_dir, &resolved)?;
    println!("exported {} embedding records to {}", n, out_file.display());
    Ok(())
}
