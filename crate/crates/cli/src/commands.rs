use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cen_core::annotation::{write_grid_records, PairDataset};
use cen_core::engine::check::check_gradients;
use cen_core::engine::{Trainer, Variant};
use cen_core::eval::{
    attribute_confusion, cluster_confusion, export_embeddings, export_worker_heatmap, heldout_accuracy, kmeans,
    mcc, mean_row_entropy, row_entropy, EvaluationReport,
};
use cen_core::nn::gradcheck::check_dense_net;
use cen_core::nn::{Activation, DenseNet, Input};
use cen_core::simulator::{read_truth, run_scenario, write_truth, CampaignConfig, PopulationConfig, ScenarioConfig};
use cen_core::synthesis::{synthesize_grids, SynthesisConfig, SynthesisStatus};
use cen_core::{CenModel, SyntheticWorld};
use cen_service::{Service, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{
    Command, EvalArgs, ExportArgs, GradcheckArgs, ServeArgs, SimulateArgs, SynthesizeArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Simulate(a) => simulate(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Synthesize(a) => synthesize(a),
        Command::Serve(a) => serve(a).map(|_| ExitCode::SUCCESS),
        Command::Export(a) => export(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<PairDataset> {
    PairDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> Result<CenModel> {
    CenModel::load(path).with_context(|| format!("loading {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = ScenarioConfig {
        n_images: a.n_images,
        k_true: a.k_true,
        cardinalities: a.cardinalities,
        population: PopulationConfig {
            biased: a.biased_workers,
            context_driven: a.context_workers,
            prior_mass: a.prior_mass,
            noise_rate: a.noise_rate,
            off_attribute_rate: a.off_attribute_rate,
            biased_temperature: a.biased_temperature,
            context_temperature: a.context_temperature,
            mixed_granularity: a.mixed_granularity,
        },
        campaign: CampaignConfig {
            n_grids: a.n_grids,
            grid_size: a.grid_size,
            grids_per_worker: a.grids_per_worker,
            min_grids_per_worker: a.min_grids_per_worker,
            seed: a.seed,
        },
    };
    let (world, campaign) = run_scenario(&cfg)?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new("simulate", a.seed, &cfg)?;

    let dataset = a.out_dir.join("dataset.jsonl");
    campaign.dataset.save(&dataset)?;
    let truth = a.out_dir.join("truth.jsonl");
    write_truth(BufWriter::new(File::create(&truth)?), &campaign.dataset, &campaign.truth)?;
    let world_path = a.out_dir.join("world.jsonl");
    world.write_to(BufWriter::new(File::create(&world_path)?))?;
    for p in [&dataset, &truth, &world_path] {
        manifest.output(p)?;
    }
    manifest.write(&a.out_dir)?;
    println!(
        "{} clusterings, {} pairs -> {}",
        campaign.dataset.clusterings.len(),
        campaign.dataset.pairs.len(),
        dataset.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let h = a.hyper.hyperparams();
    h.validate()?;
    let data = load_dataset(&a.data)?;
    create_dir(&a.out_dir)?;
    let split_seed = a.split_seed.unwrap_or(h.seed);
    let config = json!({
        "hyperparams": h,
        "test_fraction": a.test_fraction,
        "split_seed": split_seed,
        "resume": a.resume.is_some(),
    });
    let mut manifest = RunManifest::new("train", h.seed, &config)?;
    manifest.input(&a.data)?;

    let train_set = if a.test_fraction > 0.0 {
        let (train_set, test_set) = data.split_by_grids(a.test_fraction, split_seed)?;
        let train_path = a.out_dir.join("train.jsonl");
        let test_path = a.out_dir.join("test.jsonl");
        train_set.save(&train_path)?;
        test_set.save(&test_path)?;
        manifest.output(&train_path)?;
        manifest.output(&test_path)?;
        train_set
    } else {
        data
    };

    let mut trainer = match &a.resume {
        Some(path) => {
            manifest.input(path)?;
            let t = Trainer::load(path).with_context(|| format!("loading {}", path.display()))?;
            if t.model.hyper.config_hash() != h.config_hash() {
                bail!("checkpoint was trained with different hyperparameters");
            }
            t
        }
        None => Trainer::for_dataset(&train_set, h)?,
    };
    let trace = trainer.run(&train_set)?;

    let model_path = a.out_dir.join("model.json");
    trainer.model.save(&model_path)?;
    let ck_path = a.out_dir.join("checkpoint.json");
    trainer.save(&ck_path)?;
    let loss_path = a.out_dir.join("loss.csv");
    write_file(&loss_path, trace.to_csv())?;
    // Wall-clock times vary between runs, so they live in a sidecar that is
    // kept out of the manifest's output hashes.
    write_file(&a.out_dir.join("loss.timing.csv"), trace.timing_csv())?;
    for p in [&model_path, &ck_path, &loss_path] {
        manifest.output(p)?;
    }
    manifest.write(&a.out_dir)?;
    if let Some(last) = trace.epochs.last() {
        println!("epoch {} mean loss {:.5} -> {}", last.epoch, last.mean_loss, model_path.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    create_dir(&a.out_dir)?;
    let config = json!({
        "model_config_hash": m.hyper.config_hash(),
        "seed": a.seed,
        "restarts": a.restarts,
    });
    let mut manifest = RunManifest::new("eval", a.seed, &config)?;
    manifest.input(&a.model)?;
    let mut report = EvaluationReport::new(m.hyper.config_hash());

    if let Some(test) = &a.test {
        manifest.input(test)?;
        let acc = heldout_accuracy(&m, &load_dataset(test)?)?;
        report.insert("heldout_accuracy", acc);
        println!("held-out accuracy {acc:.4}");
    }

    if let (Some(data), Some(truth_path)) = (&a.data, &a.truth) {
        manifest.input(data)?;
        manifest.input(truth_path)?;
        let d = load_dataset(data)?;
        let truth = read_truth(BufReader::new(File::open(truth_path)?), &d)?;
        let k_true = truth.iter().flatten().max().map_or(0, |k| k + 1);
        let k_true = match &a.world {
            Some(w) => load_world(w)?.k_true(),
            None => k_true,
        };
        let cm = attribute_confusion(&m, &d, &d.clusterings, &truth, k_true)?;
        let diag = cm.matched_diagonal();
        for (k, v) in diag.iter().enumerate() {
            if let Some(v) = v {
                report.insert(format!("attribute_{k}_matched_accuracy"), *v);
            }
        }
        for (k, h) in row_entropy(&cm.normalized())?.iter().enumerate() {
            if !cm.empty_rows().contains(&k) {
                report.insert(format!("attribute_{k}_entropy"), *h);
            }
        }
        report.insert("mean_row_entropy", mean_row_entropy(&cm)?);
        let mut csv = String::from("attribute");
        for c in 0..cm.cols() {
            csv.push_str(&format!(",d{c}"));
        }
        csv.push('\n');
        for (k, row) in cm.counts.rows().into_iter().enumerate() {
            csv.push_str(&k.to_string());
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        let path = a.out_dir.join("confusion.csv");
        write_file(&path, csv)?;
        manifest.output(&path)?;
        println!("attribute retrieval {diag:?}");
    }

    if let Some(world_path) = &a.world {
        manifest.input(world_path)?;
        let world = load_world(world_path)?;
        if world.n_images() != m.n_images() {
            bail!("world has {} images, model {}", world.n_images(), m.n_images());
        }
        let n = world.n_categories();
        let km = kmeans(&m.embed_all()?, n, a.seed, a.restarts)?;
        let cats: Vec<usize> = (0..world.n_images()).map(|i| world.category(i)).collect();
        let score = mcc(&cluster_confusion(&cats, &km.assignments, n)?)?;
        report.insert("kmeans_objective", km.objective);
        report.insert("mcc", score);
        println!("k-means ({n} clusters) MCC {score:.4}");
    }

    let emb = a.out_dir.join("embeddings.csv");
    write_file(&emb, export_embeddings(&m)?)?;
    let heat = a.out_dir.join("worker_heatmap.csv");
    write_file(&heat, export_worker_heatmap(&m)?)?;
    let rep = a.out_dir.join("report.json");
    write_file(&rep, report.to_json()?)?;
    for p in [&emb, &heat, &rep] {
        manifest.output(p)?;
    }
    manifest.write(&a.out_dir)?;
    Ok(())
}

fn load_world(path: &Path) -> Result<SyntheticWorld> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(SyntheticWorld::read_from(BufReader::new(f))?)
}

fn synthesize(a: SynthesizeArgs) -> Result<ExitCode> {
    let m = load_model(&a.model)?;
    let cfg = SynthesisConfig {
        grid_size: a.grid_size,
        num_candidates: a.candidates,
        top_n: a.top_n,
        target_dim: a.target,
        seed: a.seed,
    };
    let mut manifest = RunManifest::new("synthesize", a.seed, &cfg)?;
    manifest.input(&a.model)?;
    let s = synthesize_grids(&m, &cfg)?;
    write_grid_records(BufWriter::new(File::create(&a.out)?), &s.records(&cfg))?;
    manifest.output(&a.out)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    manifest.write(dir)?;
    match s.status {
        SynthesisStatus::Ok => {
            println!(
                "{} grids, entropy {:.4}..{:.4} -> {}",
                s.grids.len(),
                s.grids[0].entropy,
                s.grids[s.grids.len() - 1].entropy,
                a.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        SynthesisStatus::NoMatch => {
            eprintln!("warning: no candidate grid matched the target dimension");
            Ok(ExitCode::from(2))
        }
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig::load(&a.config)?;
    cen_service::serve_blocking(cfg)?;
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let cfg = ServiceConfig::load(&a.config)?;
    let service = Service::open(cfg)?;
    write_file(&a.out, service.export_bytes()?)?;
    let ds = load_dataset(&a.out)?;
    println!("{} clusterings, {} pairs -> {}", ds.clusterings.len(), ds.pairs.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let net = DenseNet::new(&[30, 200, 200, 4], &[Activation::Relu; 3], &mut rng)?;
    let inputs = vec![Input::Index(3), Input::IndexSet(vec![1, 5, 29]), Input::Dense(vec![0.1; 30])];
    let r = check_dense_net(&net, &inputs, 2000, &mut rng)?;
    ok &= report_line("dense network", r.passes(a.tolerance), &r);
    for v in Variant::ALL {
        for weighted in [true, false] {
            let r = check_gradients(v, weighted, a.draws, a.seed)?;
            let name = format!("{v} loss ({} negative term)", if weighted { "weighted" } else { "unweighted" });
            ok &= report_line(&name, r.passes(a.tolerance), &r);
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report_line(name: &str, pass: bool, r: &cen_core::nn::gradcheck::GradCheckReport) -> bool {
    println!(
        "{} {name}: {} coordinates, max relative error {:.3e}, {} kinks skipped",
        if pass { "PASS" } else { "FAIL" },
        r.checked,
        r.max_rel_error,
        r.skipped_kinks
    );
    pass
}
