use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use pairwise_compose::config::Config;
use pairwise_compose::data::{
    build_samples, corpus_seeds, generate_scene, overlap_heatmap, sample_selected_pairs, select_boxes,
    select_multi, split_seeds, SceneRecord, TrainSample, MULTI_AREA_THRESHOLD,
};
use pairwise_compose::diffusion::sample::conditioning;
use pairwise_compose::diffusion::{ddim_sample, eval_recomposition, prepare, train as run_training, ModelState, NoiseSchedule};
use pairwise_compose::mask::{BBox, Mask};

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    dir: String,
    seed: u64,
    instances: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    width: usize,
    height: usize,
    objects_per_scene: usize,
    scenes: Vec<ManifestEntry>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_corpus(cfg: &Config, out: &Path, count: usize) -> Result<()> {
    let (train_seed, _) = split_seeds(cfg.seed);
    let mut scenes = Vec::with_capacity(count);
    for (i, seed) in corpus_seeds(train_seed, count).into_iter().enumerate() {
        let scene = generate_scene(seed, cfg.data.width, cfg.data.height, cfg.data.objects_per_scene)?;
        scene.validate().with_context(|| format!("scene {i} violates its invariants"))?;
        let dir = format!("scenes/scene_{i:04}");
        scene.save(out.join(&dir))?;
        scenes.push(ManifestEntry {
            dir,
            seed,
            instances: scene.instances.len(),
        });
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            seed: cfg.seed,
            width: cfg.data.width,
            height: cfg.data.height,
            objects_per_scene: cfg.data.objects_per_scene,
            scenes,
        },
    )?;
    log::info!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<SceneRecord>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .with_context(|| format!("reading {}/manifest.json", dir.display()))?;
    manifest
        .scenes
        .iter()
        .map(|e| SceneRecord::load(dir.join(&e.dir)).with_context(|| format!("loading {}", e.dir)))
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image: String,
    boxes: Vec<BBox>,
}

enum Mode {
    Pair,
    Multi(usize),
}

fn parse_mode(mode: &str) -> Result<Mode> {
    match mode.split_once(':') {
        None if mode == "pair" => Ok(Mode::Pair),
        Some(("multi", m)) => {
            let m: usize = m.parse().with_context(|| format!("bad object count in mode `{mode}`"))?;
            if m < 3 {
                bail!("multi mode needs at least 3 objects, got {m}");
            }
            Ok(Mode::Multi(m))
        }
        _ => bail!("unknown mode `{mode}` (expected `pair` or `multi:M`)"),
    }
}

pub fn select(cfg: &Config, out: &Path, annotations: &Path, mode: &str) -> Result<()> {
    let mode = parse_mode(mode)?;
    let file = fs::File::open(annotations).with_context(|| format!("opening {}", annotations.display()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| anyhow!("{}:{}: {e}", annotations.display(), n + 1))?;
        let selected = match mode {
            Mode::Pair => select_boxes(&ann.boxes, cfg.data.guard()).map(|(i, j)| vec![i, j]),
            Mode::Multi(m) => select_multi(&ann.boxes, m, MULTI_AREA_THRESHOLD),
        };
        let boxes = selected.as_ref().map(|s| s.iter().map(|&i| ann.boxes[i]).collect::<Vec<_>>());
        records.push(json!({ "image": ann.image, "selected": selected, "boxes": boxes }));
    }
    let mut w = fs::File::create(out.join("selection.jsonl"))?;
    for r in &records {
        writeln!(w, "{r}")?;
    }
    log::info!("selected boxes for {} images", records.len());
    Ok(())
}

pub fn train(cfg: &Config, out: &Path) -> Result<()> {
    let (train_seed, _) = split_seeds(cfg.seed);
    let samples = build_samples(&cfg.data, train_seed, cfg.data.train_scenes)?;
    let mut state = ModelState::new(cfg)?;
    let prepared = samples
        .iter()
        .map(|(_, s)| prepare(&state.model, s))
        .collect::<pairwise_compose::Result<Vec<_>>>()?;
    log::info!(
        "training {} parameters on {} scenes for {} steps",
        state.store.num_scalars(),
        prepared.len(),
        cfg.train.steps
    );
    let report = run_training(&mut state, &prepared, cfg.train.steps, cfg.seed)?;
    state.save(out.join("model.ckpt"))?;
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    for (i, loss) in report.losses.iter().enumerate() {
        writeln!(log, "{}", json!({ "step": i + 1, "loss": loss }))?;
    }
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "steps": cfg.train.steps,
            "monitor_loss_before": report.initial_eval,
            "monitor_loss_after": report.final_eval,
        }),
    )?;
    log::info!("monitor loss {:.4} -> {:.4}", report.initial_eval, report.final_eval);
    Ok(())
}

/// Loads a checkpoint; its model and data geometry take precedence, the
/// sampling settings come from the current configuration.
fn load_state(cfg: &Config, checkpoint: &Path) -> Result<ModelState> {
    let state = ModelState::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if state.config.model != cfg.model {
        log::warn!("model settings come from the checkpoint, not the configuration");
    }
    Ok(state)
}

fn held_out(cfg: &Config, state: &ModelState, count: usize) -> Result<Vec<TrainSample>> {
    let (_, seed) = split_seeds(cfg.seed);
    let mut data = cfg.data.clone();
    data.width = state.config.data.width;
    data.height = state.config.data.height;
    Ok(build_samples(&data, seed, count)?.into_iter().map(|(_, s)| s).collect())
}

pub fn sample(cfg: &Config, out: &Path, checkpoint: &Path, count: usize) -> Result<()> {
    let state = load_state(cfg, checkpoint)?;
    let schedule = NoiseSchedule::from_config(&state.config.schedule)?;
    let dir = out.join("samples");
    fs::create_dir_all(&dir)?;
    for (i, s) in held_out(cfg, &state, count)?.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        let result = ddim_sample(&state, &conditioning(&state, s, seed)?, &cfg.sample, &schedule, seed)?;
        result.image.save_pnm(dir.join(format!("sample_{i:02}.ppm")))?;
        s.target.save_pnm(dir.join(format!("target_{i:02}.ppm")))?;
        s.background.save_pnm(dir.join(format!("background_{i:02}.ppm")))?;
    }
    log::info!("wrote samples to {}", dir.display());
    Ok(())
}

pub fn eval(cfg: &Config, out: &Path, checkpoint: &Path) -> Result<()> {
    let state = load_state(cfg, checkpoint)?;
    let schedule = NoiseSchedule::from_config(&state.config.schedule)?;
    let scenes = held_out(cfg, &state, cfg.data.held_out_scenes)?;
    let record = eval_recomposition(&state, &scenes, &cfg.sample, &schedule, cfg.seed)?;
    let line = json!({
        "checkpoint_step": state.step,
        "scenes": record.scenes,
        "psnr": record.psnr,
        "ssim": record.ssim,
        "mpsnr": record.mpsnr,
        "mssim": record.mssim,
    });
    let mut f = fs::OpenOptions::new().create(true).append(true).open(out.join("metrics.jsonl"))?;
    writeln!(f, "{line}")?;
    println!("{line}");
    Ok(())
}

pub fn heatmap(cfg: &Config, out: &Path, corpus: Option<&Path>) -> Result<()> {
    let pairs: Vec<(BBox, BBox)> = match corpus {
        Some(dir) => load_corpus(dir)?
            .iter()
            .filter_map(|s| {
                let boxes = s.boxes();
                select_boxes(&boxes, cfg.data.guard()).map(|(i, j)| (boxes[i], boxes[j]))
            })
            .collect(),
        None => {
            let (w, h) = (cfg.data.width as u32, cfg.data.height as u32);
            let short = w.min(h);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample_selected_pairs(
                cfg.heatmap.pairs,
                cfg.heatmap.boxes_per_layout,
                w,
                h,
                ((short / 4).max(1), short / 2),
                cfg.data.guard(),
                &mut rng,
            )?
        }
    };
    let map = overlap_heatmap(&pairs, cfg.heatmap.grid)?;
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray = Mask::new(map.n, map.n, map.values.iter().map(|v| (v - lo) / span).collect())?;
    gray.save_pgm(out.join("heatmap.pgm"))?;
    write_json(
        &out.join("heatmap.json"),
        &json!({
            "pairs": pairs.len(),
            "grid": map.n,
            "min": lo,
            "max": hi,
            "central_mean": map.central_mean(0.2),
            "border_mean": map.border_mean(),
        }),
    )?;
    log::info!("heatmap over {} pairs: min {lo:.3} max {hi:.3}", pairs.len());
    Ok(())
}

pub fn dump_alpha(cfg: &Config, out: &Path, checkpoint: &Path, scene: usize) -> Result<()> {
    let state = load_state(cfg, checkpoint)?;
    let schedule = NoiseSchedule::from_config(&state.config.schedule)?;
    let samples = held_out(cfg, &state, scene + 1)?;
    let sample = samples
        .get(scene)
        .ok_or_else(|| anyhow!("held-out scene {scene} was not selected (sentinel)"))?;
    let seed = cfg.seed.wrapping_add(scene as u64);
    let forward = ddim_sample(&state, &conditioning(&state, sample, seed)?, &cfg.sample, &schedule, seed)?;
    let swapped = sample.reordered(&[1, 0]);
    let backward = ddim_sample(&state, &conditioning(&state, &swapped, seed)?, &cfg.sample, &schedule, seed)?;
    let dir = out.join("alpha");
    fs::create_dir_all(&dir)?;
    let tau = state.config.model.tau;
    let mut dump = Vec::new();
    for (ab, ba) in forward.delta_s.iter().zip(&backward.delta_s) {
        // Both orders share the forward map's scale so the swapped map is
        // the gray-level complement of the forward one.
        let scale = ab.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let to_gray = |v: f64| if scale > 0.0 { (v / scale + 1.0) / 2.0 } else { 0.5 };
        for (tag, map) in [("ab", ab), ("ba", ba)] {
            Mask::new(map.width, map.height, map.values.iter().map(|&v| to_gray(v)).collect())?
                .save_pgm(dir.join(format!("delta_s_step{:02}_{tag}.pgm", map.step)))?;
            let alpha = map.values.iter().map(|&v| 1.0 / (1.0 + (-v / tau).exp())).collect();
            Mask::new(map.width, map.height, alpha)?.save_pgm(dir.join(format!("alpha_step{:02}_{tag}.pgm", map.step)))?;
        }
        dump.push(json!({ "step": ab.step, "t": ab.t, "scale": scale, "ab": ab.values, "ba": ba.values }));
    }
    forward.image.save_pnm(dir.join("sample_ab.ppm"))?;
    backward.image.save_pnm(dir.join("sample_ba.ppm"))?;
    write_json(&dir.join("delta_s.json"), &dump)?;
    log::info!("wrote {} gate maps per order to {}", dump.len(), dir.display());
    Ok(())
}
