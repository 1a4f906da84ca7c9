//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::Path;

use flora::backbone::count_params;
use flora::checkpoint::{decode_adapters, encode_adapters, encode_params, load_backbone, load_params};
use flora::data::{bayes_oracle, dataset_modalities, encode_jsonl, generate_split, read_jsonl, Sample, Split};
use flora::eval::{evaluate, evaluate_probe, num_workers, EvalReport};
use flora::params::{FreezePolicy, ParamStore};
use flora::train::{pretrain, pretrain_corpus, train, train_probe, Probe, TrainMode, TrainReport};
use flora::{init_backbone, AdapterSet, Modality, ModalitySet, ModelConfig};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::cli::*;
use crate::config::{parse_toml, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{FileRecord, OutDir, RunManifest};

pub const BACKBONE_FILE: &str = "backbone.flbb";
pub const TUNED_FILE: &str = "tuned.flbb";
pub const PROBE_FILE: &str = "probe.flbb";

pub fn adapter_file(m: Modality) -> String {
    format!("{}.flra", m.name())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn read_data(path: &Path) -> Result<Vec<Sample>> {
    if !path.is_file() {
        return Err(CliError::data(format!("dataset {} does not exist", path.display())));
    }
    Ok(read_jsonl(path)?)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn parse_modalities(s: &str) -> Result<ModalitySet> {
    ModalitySet::parse_list(s).map_err(|e| CliError::usage(e.to_string()))
}

pub fn gen_data(args: GenDataArgs) -> Result<RunManifest> {
    let mut cfg = RunConfig::load(args.config.as_deref())?.data;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.p_missing_audio {
        cfg.p_missing_audio = p;
    }
    if let Some(p) = args.p_missing_video {
        cfg.p_missing_video = p;
    }
    if let Some(n) = args.n_train {
        cfg.n_samples = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    cfg.validate()?;
    let mut out = OutDir::prepare(&args.out.out, args.out.force)?;
    let train = generate_split(&cfg, Split::Train, cfg.n_samples)?;
    let test = generate_split(&cfg, Split::Test, cfg.n_test)?;
    out.write("train.jsonl", &encode_jsonl(&train)?)?;
    out.write("test.jsonl", &encode_jsonl(&test)?)?;
    let bayes = bayes_oracle(&cfg, args.n_mc)?;
    out.write("calibration.json", &pretty(&json!({ "n_mc": args.n_mc, "bayes": bayes })))?;
    println!(
        "bayes EER: text {:.4} audio {:.4} video {:.4} audio+text {:.4} joint {:.4}",
        bayes.eer_text, bayes.eer_audio, bayes.eer_video, bayes.eer_audio_text, bayes.eer_joint
    );
    let unimodal = bayes.eer_text.min(bayes.eer_audio).min(bayes.eer_video);
    if bayes.eer_joint >= unimodal {
        warn!("joint Bayes EER {:.4} is not below the best unimodal {:.4}", bayes.eer_joint, unimodal);
    }
    out.finish("gen-data", cfg.seed, None, json!({ "data": to_json(&cfg), "n_mc": args.n_mc }), vec![])
}

pub fn pretrain_cmd(args: PretrainArgs) -> Result<RunManifest> {
    let RunConfig { model, pretrain: mut cfg, .. } = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(w) = args.warmup_ratio {
        cfg.warmup_ratio = w;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(n) = args.corpus_size {
        cfg.corpus_size = n;
    }
    model.validate()?;
    let mut out = OutDir::prepare(&args.out.out, args.out.force)?;
    let mut params = init_backbone(&model, cfg.seed)?;
    let corpus = pretrain_corpus(&model, cfg.corpus_size, cfg.seed);
    let report = pretrain(&cfg, &model, &corpus, &mut params)?;
    if let Some(l) = report.epoch_loss.last() {
        println!("pretrain: final epoch loss {l:.4}");
    }
    out.write(BACKBONE_FILE, &encode_params(&model, &params)?)?;
    out.write("loss.csv", report.curve_csv().as_bytes())?;
    let config = json!({ "model": to_json(&model), "pretrain": to_json(&cfg) });
    out.finish("pretrain", cfg.seed, None, config, vec![])
}

/// Training flags resolved against the config file.
struct TrainSetup {
    run: RunConfig,
    modalities: Option<ModalitySet>,
}

fn train_setup(args: &TrainArgs) -> Result<TrainSetup> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    let t = &mut run.train;
    if let Some(s) = args.seed {
        t.seed = s;
    }
    if let Some(m) = args.mode {
        t.mode = m;
    }
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(lr) = args.lr {
        t.lr = lr;
    }
    if let Some(w) = args.warmup_ratio {
        t.warmup_ratio = w;
    }
    if let Some(b) = args.batch_size {
        t.batch_size = b;
    }
    if args.no_adapter_dropout {
        t.adapter_dropout = false;
    }
    if let Some(r) = args.rank {
        run.model.adapter_rank = r;
    }
    t.validate()?;
    let modalities = args.modalities.as_deref().map(parse_modalities).transpose()?;
    Ok(TrainSetup { run, modalities })
}

pub fn train_cmd(args: TrainArgs) -> Result<RunManifest> {
    let TrainSetup { run, modalities } = train_setup(&args)?;
    let cfg = run.train.clone();
    let data = read_data(&args.data)?;
    let mut inputs = vec![FileRecord::of(&args.data)?];

    let (mut config, mut params) = match &args.backbone {
        Some(path) => {
            inputs.push(FileRecord::of(path)?);
            load_backbone(path)?
        }
        None if cfg.mode.probe_modality().is_some() => (run.model.clone(), ParamStore::new()),
        None => return Err(CliError::usage(format!("--backbone is required for mode {}", cfg.mode))),
    };
    if let Some(r) = args.rank {
        config.adapter_rank = r;
    }
    config.validate()?;

    let mut out = OutDir::prepare(&args.out.out, args.out.force)?;
    let report: TrainReport;
    match cfg.mode {
        TrainMode::Flora | TrainMode::UnimodalText => {
            let trained = match cfg.mode {
                TrainMode::UnimodalText => ModalitySet::of(&[Modality::Text]),
                _ => modalities.unwrap_or_else(|| dataset_modalities(&data)),
            };
            if !trained.contains(Modality::Text) {
                return Err(CliError::usage("--modalities must include t"));
            }
            if cfg.mode == TrainMode::UnimodalText && modalities.is_some_and(|m| m != trained) {
                return Err(CliError::usage("unimodal-text trains only the text adapter"));
            }
            let mut adapters = AdapterSet::init(&config, trained, cfg.seed);
            report = train(&cfg, &config, &data, &mut params, Some(&mut adapters))?;
            for m in trained.iter() {
                out.write(&adapter_file(m), &encode_adapters(&adapters, m)?)?;
            }
            let tuned = params.filtered(|_, p| !p.frozen);
            out.write(TUNED_FILE, &encode_params(&config, &tuned)?)?;
        }
        TrainMode::Fft => {
            if modalities.is_some() {
                return Err(CliError::usage("--modalities applies to adapter modes only"));
            }
            report = train(&cfg, &config, &data, &mut params, None)?;
            out.write(BACKBONE_FILE, &encode_params(&config, &params)?)?;
        }
        TrainMode::UnimodalAudio | TrainMode::UnimodalVideo => {
            let (probe, r) = train_probe(&cfg, &config, &data)?;
            report = r;
            out.write(PROBE_FILE, &encode_params(&config, &probe.to_store())?)?;
        }
    }
    if let Some(l) = report.epoch_loss.last() {
        println!("train {}: final epoch loss {l:.4}", cfg.mode);
    }
    out.write("loss.csv", report.curve_csv().as_bytes())?;
    let snapshot = json!({ "model": to_json(&config), "train": to_json(&cfg) });
    out.finish("train", cfg.seed, Some(cfg.mode.name().to_string()), snapshot, inputs)
}

/// A trained model as found in a `train` output directory.
pub enum LoadedModel {
    Adapters { config: ModelConfig, params: ParamStore, adapters: AdapterSet },
    Full { config: ModelConfig, params: ParamStore },
    Probe(Probe),
}

/// Loads the model in `dir`, with only the adapters of `present`.
pub fn load_model(dir: &Path, backbone: Option<&Path>, present: ModalitySet, inputs: &mut Vec<FileRecord>) -> Result<LoadedModel> {
    let probe = dir.join(PROBE_FILE);
    if probe.is_file() {
        inputs.push(FileRecord::of(&probe)?);
        let (_, store) = load_params(&probe)?;
        return Ok(LoadedModel::Probe(Probe::from_store(&store)?));
    }
    let tuned = dir.join(TUNED_FILE);
    if tuned.is_file() {
        let backbone = backbone.ok_or_else(|| CliError::usage("--backbone is required for adapter models"))?;
        inputs.push(FileRecord::of(backbone)?);
        inputs.push(FileRecord::of(&tuned)?);
        let (base_config, mut params) = load_backbone(backbone)?;
        let (config, overlay) = load_params(&tuned)?;
        if (ModelConfig { adapter_rank: config.adapter_rank, ..base_config }) != config {
            return Err(CliError::data(format!(
                "{} was trained on a different backbone than {}",
                tuned.display(),
                backbone.display()
            )));
        }
        params.overlay(&overlay)?;
        params.apply_policy(FreezePolicy::All);
        let mut adapters = AdapterSet::empty(&config);
        for m in present.iter() {
            let path = dir.join(adapter_file(m));
            if !path.is_file() {
                return Err(CliError::data(format!(
                    "no {m} adapter in {} ({} does not exist)",
                    dir.display(),
                    path.display()
                )));
            }
            inputs.push(FileRecord::of(&path)?);
            adapters.merge(decode_adapters(&read_bytes(&path)?, &config)?)?;
        }
        return Ok(LoadedModel::Adapters { config, params, adapters });
    }
    let full = dir.join(BACKBONE_FILE);
    if full.is_file() {
        inputs.push(FileRecord::of(&full)?);
        let (config, mut params) = load_backbone(&full)?;
        params.apply_policy(FreezePolicy::All);
        return Ok(LoadedModel::Full { config, params });
    }
    Err(CliError::data(format!("{} holds no trained model", dir.display())))
}

pub fn eval_cmd(args: EvalArgs) -> Result<RunManifest> {
    let present = parse_modalities(&args.modalities)?;
    let trained = RunManifest::read(&args.model).ok();
    let mode = trained.as_ref().and_then(|m| m.mode.clone()).unwrap_or_else(|| "unknown".into());
    let seed = args.seed.or(trained.as_ref().map(|m| m.seed)).unwrap_or(0);
    let data = read_data(&args.data)?;
    let mut inputs = vec![FileRecord::of(&args.data)?];
    let model = load_model(&args.model, args.backbone.as_deref(), present, &mut inputs)?;
    let workers = num_workers();
    let report: EvalReport = match &model {
        LoadedModel::Probe(p) => {
            if !present.contains(p.modality) {
                return Err(CliError::usage(format!("this probe needs --modalities {}", p.modality.letter())));
            }
            evaluate_probe(p, &data, workers)?
        }
        LoadedModel::Adapters { config, params, adapters } => {
            if !present.contains(Modality::Text) {
                return Err(CliError::usage("--modalities must include t"));
            }
            evaluate(config, params, Some(adapters), &data, present, workers)?
        }
        LoadedModel::Full { config, params } => {
            if !present.contains(Modality::Text) {
                return Err(CliError::usage("--modalities must include t"));
            }
            evaluate(config, params, None, &data, present, workers)?
        }
    };
    let metrics = report.metrics(&mode, present, seed);
    println!(
        "eval {mode} [{}]: EER {:.4} FA@10 {:.4} n {}",
        present.label(),
        metrics.eer,
        metrics.fa_at_10,
        metrics.n
    );
    let mut out = OutDir::prepare(&args.out.out, args.out.force)?;
    out.write("metrics.json", &pretty(&metrics))?;
    out.write("scores.tsv", report.score_file().as_bytes())?;
    out.write("det.csv", report.det_csv()?.as_bytes())?;
    let snapshot = json!({ "modalities": present.label(), "workers": workers });
    out.finish("eval", seed, Some(mode), snapshot, inputs)
}

/// One row of the parameter report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub mode: String,
    pub rank: usize,
    pub frozen: usize,
    pub trainable: usize,
    pub fraction: f64,
}

/// Enumerated counts for flora (all three adapters), unimodal-text and fft,
/// cross-checked against the analytic budget.
pub fn param_rows(config: &ModelConfig) -> Result<Vec<ParamRow>> {
    let mut store = init_backbone(config, 0)?;
    let budget = config.param_budget();
    if store.numel() != budget.backbone_total() {
        return Err(CliError::data(format!(
            "enumerated {} backbone parameters, analytic count {}",
            store.numel(),
            budget.backbone_total()
        )));
    }
    let mut rows = Vec::new();
    for (mode, set) in [
        (TrainMode::Flora, ModalitySet::ALL),
        (TrainMode::UnimodalText, ModalitySet::of(&[Modality::Text])),
    ] {
        let adapters = AdapterSet::init(config, set, 0);
        let c = count_params(&store, Some(&adapters));
        if adapters.numel() != set.len() * budget.adapter_per_modality {
            return Err(CliError::data("adapter count disagrees with the analytic budget"));
        }
        rows.push(ParamRow {
            mode: mode.name().into(),
            rank: config.adapter_rank,
            frozen: c.frozen,
            trainable: c.trainable,
            fraction: c.fraction,
        });
    }
    store.apply_policy(FreezePolicy::None);
    let c = count_params(&store, None);
    rows.push(ParamRow {
        mode: TrainMode::Fft.name().into(),
        rank: config.adapter_rank,
        frozen: c.frozen,
        trainable: c.trainable,
        fraction: c.fraction,
    });
    Ok(rows)
}

pub fn params_csv(rows: &[ParamRow]) -> String {
    let mut s = String::from("mode,rank,frozen,trainable,total,fraction\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{:.8}", r.mode, r.rank, r.frozen, r.trainable, r.frozen + r.trainable, r.fraction)
            .expect("write to string");
    }
    s
}

pub fn params_report(args: ParamsReportArgs) -> Result<Vec<ParamRow>> {
    let mut inputs = Vec::new();
    let mut config = match &args.backbone {
        Some(p) => {
            inputs.push(FileRecord::of(p)?);
            load_params(p)?.0
        }
        None => RunConfig::load(args.config.as_deref())?.model,
    };
    if let Some(r) = args.rank {
        config.adapter_rank = r;
    }
    let ranks: Vec<usize> = match &args.ranks {
        Some(list) => list
            .split(',')
            .map(|r| r.trim().parse().map_err(|_| CliError::usage(format!("bad rank {r:?}"))))
            .collect::<Result<_>>()?,
        None => vec![config.adapter_rank],
    };
    let mut rows = Vec::new();
    for r in ranks {
        let c = ModelConfig { adapter_rank: r, ..config.clone() };
        c.validate()?;
        rows.extend(param_rows(&c)?);
    }
    println!("{:<14} {:>4} {:>10} {:>10} {:>9}", "mode", "rank", "frozen", "trainable", "fraction");
    for r in &rows {
        println!(
            "{:<14} {:>4} {:>10} {:>10} {:>8.3}%",
            r.mode,
            r.rank,
            r.frozen,
            r.trainable,
            100.0 * r.fraction
        );
    }
    if let Some(dir) = &args.out {
        let mut out = OutDir::prepare(dir, args.force)?;
        out.write("params.csv", params_csv(&rows).as_bytes())?;
        out.finish("params-report", 0, None, json!({ "model": to_json(&config) }), inputs)?;
    }
    Ok(rows)
}

/// Sweep spec: shared data/training settings and a list of model sizes.
#[derive(Clone, Debug, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: flora::GenConfig,
    #[serde(default)]
    pub train: flora::train::TrainConfig,
    #[serde(default)]
    pub pretrain: flora::train::PretrainConfig,
    pub size: Vec<SweepSize>,
}

#[derive(Clone, Debug, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSize {
    pub name: String,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub size: String,
    pub params: usize,
    pub trainable_fraction: f64,
    pub eer: Option<f64>,
    pub fa_at_10: Option<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.len() < 3 {
            return Err(CliError::usage(format!("a sweep needs at least 3 sizes, got {}", self.size.len())));
        }
        let mut prev = 0;
        for (i, s) in self.size.iter().enumerate() {
            if self.size[..i].iter().any(|o| o.name == s.name) {
                return Err(CliError::usage(format!("duplicate size name {:?}", s.name)));
            }
            s.model.validate()?;
            let n = s.model.param_budget().backbone_total();
            if n <= prev {
                return Err(CliError::usage(format!("size {:?} is not larger than the one before", s.name)));
            }
            prev = n;
        }
        self.data.validate()?;
        self.train.validate()?;
        if self.train.mode != TrainMode::Flora {
            return Err(CliError::usage("the sweep trains flora"));
        }
        Ok(())
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    let mut s = String::from("size,params,trainable_fraction,eer,fa_at_10\n");
    for r in rows {
        writeln!(s, "{},{},{:.8},{},{}", r.size, r.params, r.trainable_fraction, opt(r.eer), opt(r.fa_at_10))
            .expect("write to string");
    }
    s
}

pub fn scale_sweep(args: ScaleSweepArgs) -> Result<Vec<SweepRow>> {
    let mut spec: SweepSpec = parse_toml(&args.spec)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut out = OutDir::prepare(&args.out.out, args.out.force)?;
    let inputs = vec![FileRecord::of(&args.spec)?];
    let data_cfg = flora::GenConfig { seed: spec.seed, ..spec.data.clone() };
    let (train_d, test_d) = if args.params_only {
        (Vec::new(), Vec::new())
    } else {
        (
            generate_split(&data_cfg, Split::Train, data_cfg.n_samples)?,
            generate_split(&data_cfg, Split::Test, data_cfg.n_test)?,
        )
    };
    let mut rows = Vec::new();
    for size in &spec.size {
        let c = &size.model;
        if c.d_audio != data_cfg.d_audio || c.d_video != data_cfg.d_video || c.vocab_size < data_cfg.vocab_size {
            return Err(CliError::usage(format!("size {:?} does not match the data dimensions", size.name)));
        }
        let flora_row = param_rows(c)?.into_iter().next().expect("flora row");
        let mut row = SweepRow {
            size: size.name.clone(),
            params: flora_row.frozen + flora_row.trainable,
            trainable_fraction: flora_row.fraction,
            eer: None,
            fa_at_10: None,
        };
        if !args.params_only {
            info!("sweep {}: pre-training", size.name);
            let mut params = init_backbone(c, spec.seed)?;
            let pcfg = flora::train::PretrainConfig { seed: spec.seed, ..spec.pretrain.clone() };
            pretrain(&pcfg, c, &pretrain_corpus(c, pcfg.corpus_size, spec.seed), &mut params)?;
            info!("sweep {}: training", size.name);
            let mut adapters = AdapterSet::init(c, ModalitySet::ALL, spec.seed);
            let tcfg = flora::train::TrainConfig { seed: spec.seed, ..spec.train.clone() };
            train(&tcfg, c, &train_d, &mut params, Some(&mut adapters))?;
            let r = evaluate(c, &params, Some(&adapters), &test_d, ModalitySet::ALL, num_workers())?;
            row.eer = Some(r.eer);
            row.fa_at_10 = Some(r.fa_at_10);
        }
        println!(
            "{}: {} params, trainable {:.3}%{}",
            row.size,
            row.params,
            100.0 * row.trainable_fraction,
            row.eer.map(|e| format!(", EER {e:.4}")).unwrap_or_default()
        );
        rows.push(row);
    }
    if let (Some(first), Some(last)) = (rows.first().and_then(|r| r.eer), rows.last().and_then(|r| r.eer)) {
        if last > first {
            warn!("largest model EER {last:.4} exceeds smallest model EER {first:.4}");
        }
    }
    out.write("sweep.csv", sweep_csv(&rows).as_bytes())?;
    out.finish("scale-sweep", spec.seed, None, to_json(&spec), inputs)?;
    Ok(rows)
}
