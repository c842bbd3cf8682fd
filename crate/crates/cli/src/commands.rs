use clap::Args;
use partgrasp::contact::{refine, trace_csv};
use partgrasp::diffusion::{load_checkpoint, sample_many, save_checkpoint, train, Model};
use partgrasp::hand::{export_obj, export_ply, hand_surface, HandTemplate};
use partgrasp::language::{resolve_part, seg_examples, segment_by_text, train_segnet, SegMode};
use partgrasp::metrics::{evaluate, EvalItem};
use partgrasp::objects::PartLabeledObject;
use partgrasp::synth::{generate_dataset, object_seed, read_dataset, template_text, write_dataset, DatasetRecord};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::grasps::{read_grasps, write_grasps, GraspLine, ObjectCache, ObjectSpec};
use crate::{require_checkpoint, require_input, require_output, write_file, CliError};

type Result<T> = std::result::Result<T, CliError>;

fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given on the command line or in [run]")))
}

fn load_model(path: &Path) -> Result<Model> {
    require_checkpoint(path)?;
    Ok(load_checkpoint(path)?)
}

fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    require_input(path)?;
    Ok(read_dataset(path)?)
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Comma-separated categories [default: all]
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    #[arg(long)]
    pub objects_per_category: Option<usize>,
    #[arg(long)]
    pub grasps_per_object: Option<usize>,
    /// Paraphrases stored per grasp
    #[arg(long)]
    pub paraphrases: Option<usize>,
    /// Master seed [default: run.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset to write [default: run.dataset, else dataset.jsonl in the output dir]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_data(cfg: &RunConfig, a: GenDataArgs) -> Result<()> {
    let mut d = cfg.data.clone();
    if let Some(c) = a.categories {
        d.categories = c;
    }
    d.objects_per_category = a.objects_per_category.unwrap_or(d.objects_per_category);
    d.grasps_per_object = a.grasps_per_object.unwrap_or(d.grasps_per_object);
    d.paraphrases = a.paraphrases.unwrap_or(d.paraphrases);
    for c in &d.categories {
        partgrasp::objects::check_category(c)?;
    }
    let out = a.out.or_else(|| cfg.run.dataset.clone()).unwrap_or_else(|| cfg.output("dataset.jsonl"));
    require_output(&out)?;
    let seed = a.seed.unwrap_or(cfg.run.seed);
    let records = generate_dataset(&d, seed, &HandTemplate::default())?;
    write_dataset(&records, &out)?;
    let mut parts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        for s in &r.samples {
            let key = format!("{}/{}", r.object.category, r.object.part_names[s.part_label as usize]);
            *parts.entry(key).or_default() += 1;
        }
    }
    let grasps: usize = parts.values().sum();
    println!("wrote {}: {} objects, {} grasps", out.display(), records.len(), grasps);
    for (k, v) in parts {
        println!("  {k}: {v}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset [default: run.dataset]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write [default: run.checkpoint]
    #[arg(long)]
    pub out_ckpt: Option<PathBuf>,
    /// Overrides train.seed and seg.seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Segmentation training steps; 0 skips the segmentation network
    #[arg(long)]
    pub seg_steps: Option<usize>,
}

pub fn train_cmd(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let data = pick(a.data, &cfg.run.dataset, "dataset (--data)")?;
    let out = pick(a.out_ckpt, &cfg.run.checkpoint, "checkpoint (--out-ckpt)")?;
    require_input(&data)?;
    require_output(&out)?;
    let mut tc = cfg.train.clone();
    let mut sc = cfg.seg.clone();
    if let Some(s) = a.seed {
        tc.seed = s;
        sc.seed = s;
    }
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    sc.steps = a.seg_steps.unwrap_or(sc.steps);
    tc.validate()?;
    let records = read_dataset(&data)?;
    if records.is_empty() {
        return Err(partgrasp::Error::InvalidInput(format!("{} holds no records", data.display())).into());
    }
    let (mut model, history) = train(&records, &tc)?;
    println!(
        "denoiser: {} epochs, loss {:.6} -> {:.6}",
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN)
    );
    if sc.steps > 0 {
        let (net, seg_hist) = train_segnet(&seg_examples(&records), &model.vocab, &sc)?;
        println!(
            "segmentation: {} steps, loss {:.6} -> {:.6}",
            seg_hist.len(),
            seg_hist.first().copied().unwrap_or(f64::NAN),
            seg_hist.last().copied().unwrap_or(f64::NAN)
        );
        model.segnet = Some(net);
    }
    save_checkpoint(&model, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint [default: run.checkpoint]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Objects as category:seed; repeat or comma-separate
    #[arg(long = "object-spec", value_delimiter = ',')]
    pub object_spec: Vec<String>,
    /// Also sample for every object of this dataset
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Prompt used for every object [default: the template of each part in turn]
    #[arg(long)]
    pub text: Option<String>,
    /// Grasps per object and prompt
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// [default: run.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grasp file to write [default: samples.jsonl in the output dir]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn sample_cmd(cfg: &RunConfig, a: SampleArgs) -> Result<()> {
    let ckpt = pick(a.ckpt, &cfg.run.checkpoint, "checkpoint (--ckpt)")?;
    let out = a.out.unwrap_or_else(|| cfg.output("samples.jsonl"));
    require_output(&out)?;
    let mut objects: Vec<(ObjectSpec, PartLabeledObject)> = Vec::new();
    for s in &a.object_spec {
        let spec: ObjectSpec = s.parse()?;
        let o = spec.generate()?;
        objects.push((spec, o));
    }
    if let Some(p) = &a.data {
        for r in load_dataset(p)? {
            objects.push((ObjectSpec::of(&r.object), r.object));
        }
    }
    if objects.is_empty() {
        return Err(CliError::Usage("no objects: pass --object-spec or --data".into()));
    }
    let mut jobs: Vec<(usize, String)> = Vec::new();
    for (i, (_, o)) in objects.iter().enumerate() {
        match &a.text {
            Some(t) => {
                resolve_part(o, t)?;
                jobs.push((i, t.clone()));
            }
            None => jobs.extend(o.part_names.iter().map(|p| (i, template_text(&o.category, p)))),
        }
    }
    let model = load_model(&ckpt)?;
    let seed = a.seed.unwrap_or(cfg.run.seed);
    let mut lines = Vec::with_capacity(jobs.len() * a.n);
    for (j, (i, text)) in jobs.iter().enumerate() {
        let (spec, o) = &objects[*i];
        for g in sample_many(&model, o, text, a.n, object_seed(seed, 11, j))? {
            lines.push(GraspLine::new(spec, text, g));
        }
    }
    write_grasps(&lines, &out)?;
    println!("wrote {}: {} grasps for {} prompts", out.display(), lines.len(), jobs.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    /// Grasp file to refine
    #[arg(long)]
    pub grasps: PathBuf,
    /// Checkpoint holding the segmentation network [default: run.checkpoint]
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "oracle", value_parser = ["oracle", "learned"])]
    pub seg_mode: String,
    /// Dataset to take objects from instead of regenerating them
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Refinement epochs [default: opt.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Writes one objective trace CSV per grasp into this directory
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Grasp file to write [default: refined.jsonl in the output dir]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn optimize_cmd(cfg: &RunConfig, a: OptimizeArgs) -> Result<()> {
    let mode: SegMode = a.seg_mode.parse()?;
    let out = a.out.unwrap_or_else(|| cfg.output("refined.jsonl"));
    require_output(&out)?;
    if let Some(d) = &a.trace_dir {
        if !d.is_dir() {
            return Err(CliError::Io(format!("{}: no such directory", d.display())));
        }
    }
    let mut oc = cfg.opt.clone();
    oc.epochs = a.epochs.unwrap_or(oc.epochs);
    oc.validate()?;
    let lines = read_grasps(&a.grasps)?;
    let model = match mode {
        SegMode::Oracle => None,
        SegMode::Learned => {
            let m = load_model(&pick(a.ckpt, &cfg.run.checkpoint, "checkpoint (--ckpt)")?)?;
            if m.segnet.is_none() {
                return Err(partgrasp::Error::InvalidInput("checkpoint holds no segmentation network".into()).into());
            }
            Some(m)
        }
    };
    let dataset = match &a.data {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let mut cache = ObjectCache::new(&dataset);
    let mut jobs = Vec::with_capacity(lines.len());
    for l in &lines {
        let object = cache.get(&l.spec()?)?.clone();
        let learned = model.as_ref().map(|m| (m.segnet.as_ref().expect("checked above"), &m.vocab));
        let seg = segment_by_text(&object, &l.text, mode, learned)?;
        jobs.push((object, seg));
    }
    let tmpl = HandTemplate::default();
    let results: Vec<_> = lines
        .par_iter()
        .zip(jobs.par_iter())
        .map(|(l, (object, seg))| refine(&l.grasp, object, seg, &oc, &tmpl))
        .collect::<partgrasp::Result<_>>()?;
    let mut refined = Vec::with_capacity(lines.len());
    let mut improved = 0;
    for (i, (l, r)) in lines.iter().zip(&results).enumerate() {
        if r.best < r.initial {
            improved += 1;
        }
        if let Some(d) = &a.trace_dir {
            write_file(&d.join(format!("trace_{i:05}.csv")), trace_csv(&r.trace).as_bytes())?;
        }
        refined.push(GraspLine {
            grasp: r.grasp,
            ..l.clone()
        });
    }
    write_grasps(&refined, &out)?;
    println!("wrote {}: {} grasps, objective lowered on {}", out.display(), refined.len(), improved);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Grasp file to score [default: the ground-truth grasps of --objects]
    #[arg(long)]
    pub grasps: Option<PathBuf>,
    /// Dataset holding the objects (and ground truth when --grasps is absent)
    #[arg(long)]
    pub objects: Option<PathBuf>,
    /// JSON report to write [default: report.json in the output dir]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write the report as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn eval_cmd(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let report_path = a.report.unwrap_or_else(|| cfg.output("report.json"));
    require_output(&report_path)?;
    if let Some(c) = &a.csv {
        require_output(c)?;
    }
    cfg.metrics.validate()?;
    let dataset = match &a.objects {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let lines = match &a.grasps {
        Some(p) => read_grasps(p)?,
        None if a.objects.is_some() => dataset
            .iter()
            .flat_map(|r| {
                r.samples
                    .iter()
                    .map(|s| GraspLine::new(&ObjectSpec::of(&r.object), &s.template_text, s.grasp))
            })
            .collect(),
        None => return Err(CliError::Usage("pass --grasps, --objects or both".into())),
    };
    let mut cache = ObjectCache::new(&dataset);
    let mut objects = Vec::with_capacity(lines.len());
    for l in &lines {
        objects.push(cache.get(&l.spec()?)?.clone());
    }
    let items: Vec<EvalItem> = lines
        .iter()
        .zip(&objects)
        .map(|(l, o)| EvalItem {
            grasp: &l.grasp,
            object: o,
            text: &l.text,
        })
        .collect();
    let report = evaluate(&items, &cfg.metrics, &HandTemplate::default())?;
    write_file(&report_path, report.to_json()?.as_bytes())?;
    if let Some(c) = &a.csv {
        write_file(c, report.to_csv().as_bytes())?;
    }
    println!(
        "{} grasps: part accuracy {:.2}%, penetration {:.4} cm, volume {:.4} cm3, displacement {:.4} cm, entropy {:.4}",
        report.grasps,
        report.part_accuracy_percent,
        report.penetration_depth_cm,
        report.intersection_volume_cm3,
        report.displacement_mean_cm,
        report.diversity_entropy
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Grasp file
    #[arg(long)]
    pub grasp: PathBuf,
    /// Line of the grasp file to export, from 0
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Object the hand is placed against [default: the line's object]
    #[arg(long)]
    pub object: Option<String>,
    /// Mesh to write; the extension picks OBJ or PLY
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_cmd(_cfg: &RunConfig, a: ExportArgs) -> Result<()> {
    let ext = a.out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if !matches!(ext.as_deref(), Some("obj" | "ply")) {
        return Err(CliError::Usage(format!("{}: extension must be .obj or .ply", a.out.display())));
    }
    require_output(&a.out)?;
    let lines = read_grasps(&a.grasp)?;
    let line = lines.get(a.index).ok_or_else(|| {
        partgrasp::Error::InvalidInput(format!("index {} outside the {} grasps of the file", a.index, lines.len()))
    })?;
    let spec: ObjectSpec = match &a.object {
        Some(s) => s.parse()?,
        None => line.spec()?,
    };
    let object = spec.generate()?;
    let surf = hand_surface(&line.grasp, object.centroid, &HandTemplate::default());
    match ext.as_deref() {
        Some("obj") => export_obj(&surf, &a.out)?,
        _ => export_ply(&surf, &a.out)?,
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
