use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tinyseek::attention::kv_cache_size;
use tinyseek::config::RunConfig;
use tinyseek::lm::pretrain::validation_loss;
use tinyseek::lm::rl::evaluate_task;
use tinyseek::lm::{load_model, run_stage_plan, save_model, LmPolicy, PlanContext, Stage};
use tinyseek::model::{FfnKind, ToyModel};
use tinyseek::moe::{LoadStats, MoeLayerConfig, RouterState};
use tinyseek::tensor::rng;
use tinyseek::{AttentionVariant, Error, Result};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(Some(config), seed)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let resolved = cfg.resolve()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir.join("config.resolved.toml"), &cfg.to_toml()?)?;

    let model = ToyModel::new(resolved.model.clone(), cfg.seed)?;
    let ctx = PlanContext {
        tokenizer: &resolved.tokenizer,
        corpus: resolved.corpus.as_ref(),
        seed: cfg.seed,
        precision: cfg.precision,
        diagnostic_dir: Some(dir),
    };
    let report = run_stage_plan(&cfg.plan, model, &ctx)?;

    let mut summary = String::from("# tinyseek-run-summary v1\nstage,name,key,value\n");
    for (i, st) in report.stages.iter().enumerate() {
        let stem = format!("stage{i}_{}", st.name);
        write(&dir.join(format!("{stem}.csv")), &st.csv)?;
        if let Some(records) = &st.records {
            tinyseek::lm::sft::write_sft(&dir.join(format!("{stem}.jsonl")), records)?;
        }
        for (k, v) in &st.summary {
            writeln!(summary, "{i},{},{k},{v}", st.name).unwrap();
        }
        println!("stage {i} {}: {}", st.name, fmt_summary(&st.summary));
    }
    write(&dir.join("metrics.csv"), &summary)?;
    save_model(&report.model, &resolved.tokenizer, &dir.join("model.ckpt"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn fmt_summary(s: &std::collections::BTreeMap<String, f64>) -> String {
    s.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" ")
}

pub fn eval(checkpoint: &Path, arithmetic: bool, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let (model, tok) = load_model(checkpoint).map_err(|e| Error::Config(format!("{}: {e}", checkpoint.display())))?;
    let cfg = load_config(config, seed)?;
    if arithmetic {
        let stop = tok
            .id("\n")
            .ok_or_else(|| Error::Config("checkpoint vocabulary has no line terminator".into()))?;
        tok.encode(&tinyseek::lm::arith::alphabet())
            .map_err(|e| Error::Config(format!("checkpoint vocabulary cannot express the task: {e}")))?;
        let policy = LmPolicy { model, stop, max_new: 32 };
        let e = evaluate_task(&policy, &tok, &cfg.plan.task, cfg.plan.eval_prompts, cfg.plan.eval_samples, cfg.seed)?;
        println!("accuracy={}", e.accuracy);
        println!("format_rate={}", e.format_rate);
        println!("mean_len={}", e.mean_len);
        return Ok(());
    }
    if config.is_none() {
        return Err(Error::Config("--task lm needs --config for its corpus".into()));
    }
    let resolved = cfg.resolve()?;
    if resolved.tokenizer != tok {
        return Err(Error::Config("checkpoint vocabulary does not match the configured corpus".into()));
    }
    let corpus = resolved.corpus.ok_or_else(|| Error::Config("config has no corpus".into()))?;
    let seq_len = cfg
        .plan
        .stages
        .iter()
        .find_map(|s| match s {
            Stage::Pretrain(p) => Some(p.seq_len),
            _ => None,
        })
        .unwrap_or(64);
    let loss = validation_loss(&model, &corpus, 16, seq_len, cfg.seed)?;
    println!("val_loss={loss}");
    println!("ln_vocab={}", (tok.len() as f64).ln());
    println!("vocab_size={}", tok.len());
    Ok(())
}

pub fn inspect(moe: bool, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    if moe {
        inspect_moe(&cfg.model.moe, cfg.model.ffn, cfg.model.layers(), cfg.seed)
    } else {
        inspect_attention(&cfg)
    }
}

fn inspect_attention(cfg: &RunConfig) -> Result<()> {
    let a = &cfg.model.attention;
    a.validate()?;
    let seq = cfg
        .plan
        .stages
        .iter()
        .find_map(|s| match s {
            Stage::Pretrain(p) => Some(p.seq_len),
            _ => None,
        })
        .unwrap_or(64);
    let mha = kv_cache_size(a, AttentionVariant::Mha);
    let mla = kv_cache_size(a, AttentionVariant::Mla);
    let unit = (a.d_h * a.layers) as f64;
    println!("KV cache (scalars), l={} d_h={} n_h={} d_c={} d_h_r={}, sequence of {seq} tokens", a.layers, a.d_h, a.n_h, a.d_c, a.d_h_r);
    println!("{:<8}{:>12}{:>14}{:>14}{:>12}", "variant", "per_token", "per_sequence", "in_d_h_l", "vs_mha");
    for (name, size) in [("mha", mha), ("mla", mla)] {
        println!(
            "{name:<8}{size:>12}{:>14}{:>14}{:>12.4}",
            size * seq,
            format!("{}", size as f64 / unit),
            size as f64 / mha as f64
        );
    }
    Ok(())
}

fn inspect_moe(c: &MoeLayerConfig, ffn: FfnKind, layers: usize, seed: u64) -> Result<()> {
    c.validate()?;
    if ffn == FfnKind::Dense {
        println!("note: model.ffn = dense; figures describe the configured MoE sublayer");
    }
    println!("experts_total={}", c.total_experts());
    println!("experts_shared={}", c.k_s);
    println!("experts_routed={}", c.n_routed());
    println!("routed_per_token={}", c.k_routed());
    println!("expert_inner={}", c.expert_inner());
    println!("params_per_expert={}", c.params_per_expert());
    println!("expert_params_total={}", c.total_expert_params());
    println!("expert_params_activated={}", c.activated_expert_params());
    println!("router_params={}", c.router_params());
    println!("layers={layers}");
    // Routing summary over standard normal tokens with fresh centroids.
    let centroids = rng::normal_tensor(seed, "inspect.centroids", &[c.n_routed(), c.d], 0.02);
    let mut router = RouterState::new(centroids);
    let tokens = rng::randn(&mut rng::stream(seed, "inspect.tokens"), &[1024, c.d]);
    for t in 0..1024 {
        router.route(tokens.row(t), c)?;
    }
    let stats: LoadStats = router.end_batch(c)?;
    let f = stats.load_fractions(c.k_routed())?;
    println!("routing_tokens=1024");
    println!("load_fractions={}", f.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(","));
    println!("max_mean_load_ratio={:.4}", stats.max_mean_ratio());
    Ok(())
}

pub fn print_default_config() -> Result<()> {
    print!("{}", RunConfig::default().to_toml()?);
    Ok(())
}
