use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use pointhop::classifier::{evaluate, fit_llsr, predict as llsr_predict};
use pointhop::dataset::{load_xyz_dir, read_xyz, save_xyz_dir, subsample};
use pointhop::saab::cross_correlation;
use pointhop::synthetic::shapes_dataset;
use pointhop::tree::fit_tree;
use pointhop::{
    fit_model, load_model, save_model, Dataset, Error, Evaluation, LlsrOptions, Matrix, ModelContainer, PointCloud,
    RankMode, Result, Split,
};
use rayon::prelude::*;

use crate::config::RunConfig;

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidInput(format!("--{flag} is required for this command")))
}

/// Writes to `--out` when given, else stdout.
fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        }),
        None => match io::stdout().lock().write_all(text.as_bytes()) {
            // a closed pipe (e.g. `| head`) is not an error
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            }),
            _ => Ok(()),
        },
    }
}

/// Per-cloud seed so each cloud is sampled independently but reproducibly.
fn cloud_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Loads a split and samples every cloud down to `num_points`, once.
fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let root = require(&cfg.data, "data")?;
    let mut ds = load_xyz_dir(root, split)?;
    let n = cfg.num_points;
    ds.clouds = ds
        .clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| if c.len() > n { subsample(c, n, cloud_seed(cfg.seed, i)) } else { c.clone() })
        .collect();
    info!("loaded {} {} clouds in {} classes", ds.len(), split.dir_name(), ds.num_classes());
    Ok(ds)
}

fn load(cfg: &RunConfig) -> Result<ModelContainer> {
    load_model(require(&cfg.model, "model")?)
}

fn check_classes(model: &ModelContainer, ds: &Dataset) -> Result<()> {
    if model.class_names != ds.class_names {
        return Err(Error::InvalidInput(format!(
            "dataset classes {:?} do not match model classes {:?}",
            ds.class_names, model.class_names
        )));
    }
    Ok(())
}

fn accuracy(pred: &[usize], ds: &Dataset) -> Result<Evaluation> {
    evaluate(pred, &ds.labels(), ds.num_classes())
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let model_path = require(&cfg.model, "model")?;
    let start = Instant::now();
    let train = load_split(cfg, Split::Train)?;
    let load_time = start.elapsed();
    let out = fit_model(&train, &cfg.pipeline())?;
    save_model(&out.model, model_path)?;
    let total = start.elapsed();

    let tree = &out.model.tree;
    let leaf_energy: f64 = tree.leaf_order().iter().map(|&i| tree.nodes()[i].energy).sum();
    let filter_params = tree.parameter_count();
    let cls_params = out.model.classifier.as_ref().map_or(0, |c| c.parameter_count());
    let train_pred = out.predict_train(&train.clouds)?;
    let train_eval = accuracy(&train_pred, &train)?;

    println!("clouds: {}", train.len());
    println!("classes: {}", train.num_classes());
    println!("nodes: {}", tree.nodes().len());
    println!("leaves: {}", tree.leaf_order().len());
    println!("features: {}", tree.feature_dim());
    println!(
        "selected features: {}",
        out.model.selected_columns().map_or(tree.feature_dim(), <[usize]>::len)
    );
    println!("filter parameters: {filter_params} ({} bytes)", filter_params * 8);
    println!("classifier parameters: {cls_params} ({} bytes)", cls_params * 8);
    println!("leaf energy sum: {leaf_energy:.6}");
    println!("train accuracy: {:.4}", train_eval.overall_accuracy);
    println!("time load: {:.3}s", load_time.as_secs_f64());
    for (phase, d) in &out.timings {
        println!("time {phase}: {:.3}s", d.as_secs_f64());
    }
    println!("time total: {:.3}s", total.as_secs_f64());
    println!("model: {}", model_path.display());
    println!("sha256: {}", out.model.checksum_hex());
    Ok(())
}

fn confusion_csv(e: &Evaluation, names: &[String]) -> String {
    let mut s = String::from("true\\pred");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for (name, row) in names.iter().zip(&e.confusion) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn eval(cfg: &RunConfig, split: Split) -> Result<()> {
    let model = load(cfg)?;
    let ds = load_split(cfg, split)?;
    check_classes(&model, &ds)?;
    let start = Instant::now();
    let e = accuracy(&model.predict(&ds.clouds)?, &ds)?;
    println!("clouds: {}", ds.len());
    println!("overall accuracy: {:.4}", e.overall_accuracy);
    println!("class-avg accuracy: {:.4}", e.class_avg_accuracy);
    println!("time predict: {:.3}s", start.elapsed().as_secs_f64());
    if let Some(path) = &cfg.out {
        fs::write(path, confusion_csv(&e, &model.class_names)).map_err(|err| Error::Io {
            path: path.clone(),
            source: err,
        })?;
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, files: &[PathBuf]) -> Result<()> {
    let model = load(cfg)?;
    let clouds = files
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let c = PointCloud::new(read_xyz(f)?)?;
            Ok(if c.len() > cfg.num_points {
                subsample(&c, cfg.num_points, cloud_seed(cfg.seed, i))
            } else {
                c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pred = model.predict(&clouds)?;
    let mut s = String::from("file,class\n");
    for (f, p) in files.iter().zip(pred) {
        let _ = writeln!(s, "{},{}", f.display(), model.class_names[p]);
    }
    emit(cfg, &s)
}

pub fn rank(cfg: &RunConfig) -> Result<()> {
    let model = load(cfg)?;
    let sel = model
        .selection
        .as_ref()
        .ok_or_else(|| Error::InvalidState("model has no stored ranking".into()))?;
    let r = &sel.ranked;
    let rank_ce = r.ranks(RankMode::CrossEntropy);
    let rank_e = r.ranks(RankMode::Energy);
    let mut s = String::from("node_id,aggregation,energy,cross_entropy,rank_ce,rank_energy\n");
    for (col, (node, agg)) in model.tree.provenance().into_iter().enumerate() {
        let _ = writeln!(
            s,
            "{node},{},{},{},{},{}",
            agg.name(),
            r.energy[col],
            r.cross_entropy[col],
            rank_ce[col],
            rank_e[col]
        );
    }
    emit(cfg, &s)
}

fn train_val(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if cfg.val_fraction <= 0.0 {
        return Err(Error::InvalidInput("sweeps need val_fraction > 0".into()));
    }
    load_split(cfg, Split::Train)?.split_validation(cfg.val_fraction, cfg.seed)
}

fn llsr_options(cfg: &RunConfig) -> LlsrOptions {
    LlsrOptions {
        ridge: cfg.ridge,
        standardize: cfg.standardize,
    }
}

pub fn sweep_threshold(cfg: &RunConfig) -> Result<()> {
    let (train, val) = train_val(cfg)?;
    let mut s = String::from("T,train_acc,val_acc\n");
    for &t in &cfg.thresholds {
        let mut pc = cfg.pipeline();
        pc.tree.energy_threshold = t;
        let out = fit_model(&train, &pc)?;
        let tr = accuracy(&out.predict_train(&train.clouds)?, &train)?;
        let va = accuracy(&out.model.predict(&val.clouds)?, &val)?;
        info!("T={t}: {} leaves", out.model.tree.leaf_order().len());
        let _ = writeln!(s, "{t},{:.6},{:.6}", tr.overall_accuracy, va.overall_accuracy);
    }
    emit(cfg, &s)
}

pub fn sweep_features(cfg: &RunConfig, mode: &str) -> Result<()> {
    let modes = match mode {
        "both" => vec![RankMode::CrossEntropy, RankMode::Energy],
        m => vec![m.parse()?],
    };
    let (train, val) = train_val(cfg)?;
    // the model's tree when given, else a fresh one fit on the train part
    let (tree, xt) = match &cfg.model {
        Some(path) => {
            let model = load_model(path)?;
            check_classes(&model, &train)?;
            let xt = model.tree.transform_batch(&train.clouds)?;
            (model.tree, xt)
        }
        None => {
            let f = fit_tree(&train.clouds, &cfg.pipeline().tree)?;
            (f.tree, f.features)
        }
    };
    let xv = tree.transform_batch(&val.clouds)?;
    let ranked = pointhop::ranking::rank_features(
        &xt,
        &train.labels(),
        train.num_classes(),
        &tree.column_energies(),
        cfg.pipeline().rank,
    )?;
    let mut s = String::from("m,mode,train_acc,val_acc\n");
    for &m in &cfg.feature_counts {
        let m = m.min(tree.feature_dim());
        for &mode in &modes {
            let cols = ranked.select(mode, m)?;
            let model = fit_llsr(&xt.select_columns(&cols), &train.labels(), train.num_classes(), llsr_options(cfg))?;
            let tr = accuracy(&llsr_predict(&model, &xt.select_columns(&cols))?, &train)?;
            let va = accuracy(&llsr_predict(&model, &xv.select_columns(&cols))?, &val)?;
            let tag = match mode {
                RankMode::CrossEntropy => "ce",
                RankMode::Energy => "energy",
            };
            let _ = writeln!(s, "{m},{tag},{:.6},{:.6}", tr.overall_accuracy, va.overall_accuracy);
        }
    }
    emit(cfg, &s)
}

pub fn bench_density(cfg: &RunConfig) -> Result<()> {
    let model = match &cfg.model {
        Some(path) if path.exists() => load_model(path)?,
        _ => {
            info!("no model given; fitting one on the training split");
            let out = fit_model(&load_split(cfg, Split::Train)?, &cfg.pipeline())?;
            if let Some(path) = &cfg.model {
                save_model(&out.model, path)?;
            }
            out.model
        }
    };
    let test = load_split(cfg, Split::Test)?;
    check_classes(&model, &test)?;
    let mut s = String::from("points,overall_acc,class_avg_acc\n");
    for &n in &cfg.density_sizes {
        if n == 0 {
            return Err(Error::InvalidInput("density sizes must be positive".into()));
        }
        let clouds: Vec<PointCloud> = test
            .clouds
            .par_iter()
            .enumerate()
            .map(|(i, c)| subsample(c, n.min(c.len()), cloud_seed(cfg.seed ^ n as u64, i)))
            .collect();
        let e = accuracy(&model.predict(&clouds)?, &test)?;
        let _ = writeln!(s, "{n},{:.6},{:.6}", e.overall_accuracy, e.class_avg_accuracy);
    }
    emit(cfg, &s)
}

fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn report_correlation(cfg: &RunConfig, split: Split) -> Result<()> {
    let model = load(cfg)?;
    let ds = load_split(cfg, split)?;
    let coeffs = model.tree.root_coefficients(&ds.clouds)?;
    let corr = cross_correlation(&coeffs)?;
    let d = corr.rows();
    let max_diag = (0..d).map(|i| corr.get(i, i).abs()).fold(0.0, f64::max);
    let max_off = (1..d)
        .flat_map(|i| (1..d).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| corr.get(i, j).abs())
        .fold(0.0, f64::max);
    info!("max |AC-AC off-diagonal| / max diagonal = {:e}", max_off / max_diag);
    emit(cfg, &matrix_csv(&corr))
}

pub fn synth(cfg: &RunConfig, per_class: usize, test_per_class: usize, points: usize, noise: f64) -> Result<()> {
    let root = cfg
        .out
        .as_deref()
        .or(cfg.data.as_deref())
        .ok_or_else(|| Error::InvalidInput("--out is required for synth".into()))?;
    if per_class == 0 || points == 0 {
        return Err(Error::InvalidInput("per-class and points must be positive".into()));
    }
    save_xyz_dir(root, &shapes_dataset(per_class, points, noise, cfg.seed, Split::Train))?;
    if test_per_class > 0 {
        save_xyz_dir(
            root,
            &shapes_dataset(test_per_class, points, noise, cfg.seed.wrapping_add(1), Split::Test),
        )?;
    }
    println!("wrote synthetic dataset to {}", root.display());
    Ok(())
}
