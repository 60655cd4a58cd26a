//! File-driven pipeline front end: scores -> graph -> hierarchy -> tree
//! -> relabel -> train -> eval, each stage one subcommand reading and
//! writing plain text artifacts.

pub mod config;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::community::{louvain_hierarchy, Hierarchy};
use crate::congraph::{build_confusion_graph_labeled, ConfusionGraph};
use crate::cvt::{
    build_cvt_capped, deserialize_tree, export_dot, export_labels, relabel, serialize_tree,
    ConfusionVisualTree,
};
use crate::error::{Error, Result};
use crate::ingest::{
    generate_synthetic, load_names, load_records, load_samples, mean_classifier_records,
    write_records, write_samples, SampleSet, SyntheticSpec,
};
use crate::vtnet::{
    checkpoint, gradient_check, metrics_to_csv, train, evaluate, FineLossMode, LayerSpec,
    LrSchedule, Tensor, TrainPhase, VtNet, VtNetConfig,
};
use config::IniConfig;

#[derive(Parser, Debug)]
#[command(name = "cvtnet", about = "Confusion-tree guided branch network pipeline")]
pub struct Cli {
    /// Config file (flat `key = value` with [section] headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override [graph] n_top.
    #[arg(long, global = true)]
    pub n_top: Option<usize>,
    /// Output directory (default `out`, or [paths] out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Omit the timestamp header line for byte-exact outputs.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a planted-hierarchy dataset.
    Synth,
    /// Build the confusion graph from score records.
    BuildGraph,
    /// Detect the community hierarchy in a graph file.
    Detect,
    /// Assemble the tree from a hierarchy file.
    Tree,
    /// Emit per-sample multi-level labels for a tree.
    Relabel,
    /// Train the branch network on labeled samples.
    Train,
    /// Evaluate a trained model checkpoint.
    Eval,
    /// Export a tree file as DOT.
    ExportDot,
    /// Verify analytic gradients against finite differences.
    Gradcheck,
}

struct Ctx {
    cfg: IniConfig,
    seed: Option<u64>,
    n_top: Option<usize>,
    out: PathBuf,
    no_timestamp: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Ctx> {
        let cfg = match &cli.config {
            Some(path) => IniConfig::load(path)?,
            None => IniConfig::default(),
        };
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.get("paths", "out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Ctx {
            cfg,
            seed: cli.seed,
            n_top: cli.n_top,
            out,
            no_timestamp: cli.no_timestamp,
        })
    }

    fn seed_for(&self, section: &str) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        self.cfg.get_or(section, "seed", 0)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.cfg.get("paths", key).map(PathBuf::from)
    }

    /// A path from [paths], defaulting to a file in the output directory
    /// (so pipeline stages chain without configuration).
    fn path_or_out(&self, key: &str, default_name: &str) -> PathBuf {
        self.path(key).unwrap_or_else(|| self.out.join(default_name))
    }

    fn header(&self, command: &str, detail: &str) -> String {
        let mut h = format!("# cvtnet {command} {detail}\n");
        if !self.no_timestamp {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let _ = writeln!(h, "# generated unix_time={now}");
        }
        h
    }

    fn write_artifact(&self, name: &str, contents: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|source| Error::Io {
            path: self.out.clone(),
            source,
        })?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::BuildGraph => cmd_build_graph(&ctx),
        Command::Detect => cmd_detect(&ctx),
        Command::Tree => cmd_tree(&ctx),
        Command::Relabel => cmd_relabel(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::ExportDot => cmd_export_dot(&ctx),
        Command::Gradcheck => cmd_gradcheck(&ctx),
    }
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid {what} entry `{x}`")))
        })
        .collect()
}

fn parse_layer_list(s: &str) -> Result<Vec<LayerSpec>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(LayerSpec::parse).collect()
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let branching = parse_usize_list(
        ctx.cfg.get("synth", "branching").unwrap_or("2,4"),
        "branching",
    )?;
    let spec = SyntheticSpec {
        branching,
        samples_per_leaf: ctx.cfg.get_or("synth", "samples_per_leaf", 50)?,
        feature_dim: ctx.cfg.get_or("synth", "feature_dim", 6)?,
        separation: ctx.cfg.get_or("synth", "separation", 10.0)?,
        noise: ctx.cfg.get_or("synth", "noise", 1.0)?,
    };
    let seed = ctx.seed_for("synth")?;
    let (manifest, samples, tree) = generate_synthetic(&spec, seed)?;

    let header = ctx.header("synth", &format!("seed={seed}"));
    let set = SampleSet {
        num_categories: manifest.category_names.len(),
        feature_dim: manifest.feature_dim,
        samples,
    };
    let mut samples_text = write_samples(&set);
    samples_text.insert_str(samples_text.find('\n').unwrap() + 1, &header);
    ctx.write_artifact("samples.txt", &samples_text)?;
    ctx.write_artifact("names.txt", &(manifest.category_names.join("\n") + "\n"))?;
    // Score records from a nearest-mean classifier over the generated
    // samples, so the confusion-graph stage has an input to chain from.
    let records = mean_classifier_records(&set, spec.noise)?;
    let mut records_text = write_records(&records);
    records_text.insert_str(records_text.find('\n').unwrap() + 1, &header);
    ctx.write_artifact("records.txt", &records_text)?;
    ctx.write_artifact(
        "true_tree.txt",
        &format!("{header}{}", serialize_tree(&tree)),
    )?;
    println!(
        "synth: {} samples, {} categories, tree depth {}",
        set.samples.len(),
        set.num_categories,
        tree.depth()
    );
    Ok(())
}

fn cmd_build_graph(ctx: &Ctx) -> Result<()> {
    let records_path = ctx.path_or_out("records", "records.txt");
    let set = load_records(&records_path)?;
    let n_top = match ctx.n_top {
        Some(n) => n,
        None => ctx.cfg.get_or("graph", "n_top", 5.min(set.num_categories))?,
    };
    let labels = match ctx.path("names") {
        Some(p) => load_names(&p)?,
        None => (0..set.num_categories).map(|i| format!("n{i}")).collect(),
    };
    let graph = build_confusion_graph_labeled(&set, n_top, labels)?;
    let mut text = ctx.header("build-graph", &format!("n_top={n_top} seed={}", ctx.seed_for("graph")?));
    let _ = writeln!(
        text,
        "#graph nodes={} total_weight={}",
        graph.num_nodes(),
        graph.total_weight()
    );
    text.push_str(&graph.export_edge_list());
    let path = ctx.write_artifact("graph.txt", &text)?;
    println!(
        "build-graph: {} nodes, total weight {} -> {}",
        graph.num_nodes(),
        graph.total_weight(),
        path.display()
    );
    Ok(())
}

fn cmd_detect(ctx: &Ctx) -> Result<()> {
    let graph_path = ctx.path_or_out("graph", "graph.txt");
    let text = std::fs::read_to_string(&graph_path).map_err(|source| Error::Io {
        path: graph_path.clone(),
        source,
    })?;
    let graph = ConfusionGraph::parse_edge_list(&text)?;
    let seed = ctx.seed_for("detect")?;
    let hierarchy = louvain_hierarchy(&graph, seed)?;
    let mut out = ctx.header("detect", &format!("seed={seed}"));
    out.push_str(&hierarchy.export());
    let path = ctx.write_artifact("hierarchy.txt", &out)?;
    let sizes: Vec<usize> = hierarchy
        .levels
        .iter()
        .map(|l| l.partition.num_communities())
        .collect();
    println!("detect: community counts per level {sizes:?} -> {}", path.display());
    Ok(())
}

fn load_tree_names(ctx: &Ctx, c: usize) -> Result<Vec<String>> {
    match ctx.path("names") {
        Some(p) => load_names(&p),
        None => Ok((0..c).map(|i| format!("n{i}")).collect()),
    }
}

fn cmd_tree(ctx: &Ctx) -> Result<()> {
    let hierarchy_path = ctx.path_or_out("hierarchy", "hierarchy.txt");
    let text = std::fs::read_to_string(&hierarchy_path).map_err(|source| Error::Io {
        path: hierarchy_path.clone(),
        source,
    })?;
    let hierarchy = Hierarchy::parse(&text)?;
    let names = load_tree_names(ctx, hierarchy.num_nodes())?;
    let depth_cap = ctx.cfg.get_parsed::<usize>("tree", "depth_cap")?;
    let tree = build_cvt_capped(&hierarchy, &names, depth_cap)?;
    let mut out = ctx.header("tree", &format!("seed={}", ctx.seed_for("tree")?));
    out.push_str(&serialize_tree(&tree));
    let path = ctx.write_artifact("tree.txt", &out)?;
    println!(
        "tree: depth {}, level sizes {:?} -> {}",
        tree.depth(),
        tree.level_sizes(),
        path.display()
    );
    Ok(())
}

fn load_tree(ctx: &Ctx) -> Result<ConfusionVisualTree> {
    let tree_path = ctx.path_or_out("tree", "tree.txt");
    let text = std::fs::read_to_string(&tree_path).map_err(|source| Error::Io {
        path: tree_path.clone(),
        source,
    })?;
    deserialize_tree(&text)
}

fn load_sample_file(ctx: &Ctx) -> Result<SampleSet> {
    let samples_path = ctx.path_or_out("samples", "samples.txt");
    load_samples(&samples_path)
}

fn cmd_relabel(ctx: &Ctx) -> Result<()> {
    let tree = load_tree(ctx)?;
    let set = load_sample_file(ctx)?;
    let labels = relabel(&set.samples, &tree)?;
    let mut out = ctx.header("relabel", &format!("seed={}", ctx.seed_for("relabel")?));
    out.push_str(&export_labels(&labels));
    let path = ctx.write_artifact("labels.txt", &out)?;
    println!("relabel: {} samples, {} targets each -> {}", labels.len(), tree.depth() - 1, path.display());
    Ok(())
}

fn build_net_from_config(ctx: &Ctx, tree: &ConfusionVisualTree, input_dim: usize, seed: u64) -> Result<VtNet> {
    let head_sizes = tree.level_sizes();
    let k = head_sizes.len();
    let base = parse_layer_list(
        ctx.cfg
            .get("net", "base")
            .unwrap_or("affine(32);relu;affine(32);relu"),
    )?;
    let taps = match ctx.cfg.get("net", "taps") {
        Some(s) => parse_usize_list(s, "taps")?,
        None => (1..k).map(|i| i * base.len() / k).collect(),
    };
    let default_stack = ctx.cfg.get("net", "branch").unwrap_or("affine(32);relu");
    let mut branch_stacks = Vec::with_capacity(k);
    for b in 0..k {
        let stack_text = ctx
            .cfg
            .get("net", &format!("branch{b}"))
            .unwrap_or(default_stack);
        branch_stacks.push(parse_layer_list(stack_text)?);
    }
    let fine_loss_mode = FineLossMode::parse(ctx.cfg.get("net", "fine_loss").unwrap_or("literal"))?;
    let config = VtNetConfig {
        input_shape: vec![input_dim],
        base,
        taps,
        branch_stacks,
        head_sizes,
        fine_loss_mode,
        seed,
    };
    VtNet::build(config, tree.parent_map())
}

fn phase_from_config(ctx: &Ctx, name: &str, weights: Vec<f64>, shuffle_seed: u64) -> Result<TrainPhase> {
    let initial = ctx.cfg.get_or("train", &format!("{name}_lr"), 0.003)?;
    let mut changes = Vec::new();
    if let Some(s) = ctx.cfg.get("train", &format!("{name}_lr_changes")) {
        for part in s.split(',') {
            let (epoch, lr) = part.split_once(':').ok_or_else(|| {
                Error::Config(format!("invalid lr change `{part}`, expected epoch:lr"))
            })?;
            changes.push((
                epoch.trim().parse().map_err(|_| Error::Config("invalid lr change epoch".into()))?,
                lr.trim().parse().map_err(|_| Error::Config("invalid lr change value".into()))?,
            ));
        }
    }
    Ok(TrainPhase {
        loss_weights: weights,
        epochs: ctx.cfg.get_or("train", &format!("{name}_epochs"), 20)?,
        lr: LrSchedule { initial, changes },
        batch_size: ctx.cfg.get_or("train", "batch_size", 32)?,
        shuffle_seed,
    })
}

fn dataset_from(set: &SampleSet, tree: &ConfusionVisualTree) -> Result<Vec<(Tensor, crate::cvt::MultiLevelLabel)>> {
    let labels = relabel(&set.samples, tree)?;
    set.samples
        .iter()
        .zip(labels)
        .map(|(s, l)| Ok((Tensor::from_vec(&[set.feature_dim], s.features.clone())?, l)))
        .collect()
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let tree = load_tree(ctx)?;
    let set = load_sample_file(ctx)?;
    let seed = ctx.seed_for("train")?;
    let mut net = build_net_from_config(ctx, &tree, set.feature_dim, seed)?;

    let data = dataset_from(&set, &tree)?;
    let holdout: f64 = ctx.cfg.get_or("train", "holdout", 0.2)?;
    let n_holdout = ((data.len() as f64) * holdout).round() as usize;
    // Deterministic split: every k-th sample held out.
    let mut train_set = Vec::new();
    let mut held = Vec::new();
    let stride = if n_holdout == 0 { usize::MAX } else { data.len() / n_holdout.max(1) };
    for (i, item) in data.into_iter().enumerate() {
        if stride != usize::MAX && i % stride == 0 && held.len() < n_holdout {
            held.push(item);
        } else {
            train_set.push(item);
        }
    }

    let k = net.num_branches();
    let phase1 = phase_from_config(ctx, "phase1", TrainPhase::coarse(k, 0).loss_weights, 1)?;
    let phase2 = phase_from_config(ctx, "phase2", TrainPhase::fine(k, 0).loss_weights, 2)?;
    let rows = train(&mut net, &train_set, &[phase1, phase2], seed)?;

    let header = ctx.header("train", &format!("seed={seed}"));
    ctx.write_artifact("metrics.csv", &format!("{header}{}", metrics_to_csv(&rows)))?;
    ctx.write_artifact("model.txt", &format!("{header}{}", checkpoint::save(&net)))?;

    let eval_set = if held.is_empty() { &train_set } else { &held };
    let acc = evaluate(&mut net, eval_set)?;
    let split = if held.is_empty() { "train" } else { "holdout" };
    for (b, a) in acc.iter().enumerate() {
        println!("train: branch {} {split} top1 {a}", b + 1);
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let tree = load_tree(ctx)?;
    let set = load_sample_file(ctx)?;
    let model_path = ctx.path_or_out("model", "model.txt");
    let text = std::fs::read_to_string(&model_path).map_err(|source| Error::Io {
        path: model_path.clone(),
        source,
    })?;
    let mut net = checkpoint::load(&text)?;
    let data = dataset_from(&set, &tree)?;
    let acc = evaluate(&mut net, &data)?;
    let mut out = ctx.header("eval", &format!("seed={}", ctx.seed_for("eval")?));
    for (b, a) in acc.iter().enumerate() {
        let _ = writeln!(out, "branch={} top1={a}", b + 1);
        println!("eval: branch {} top1 {a}", b + 1);
    }
    ctx.write_artifact("eval.txt", &out)?;
    Ok(())
}

fn cmd_export_dot(ctx: &Ctx) -> Result<()> {
    let tree = load_tree(ctx)?;
    let dot = export_dot(&tree);
    let path = ctx.write_artifact("tree.dot", &dot)?;
    println!("export-dot: {} nodes -> {}", tree.nodes().len(), path.display());
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx) -> Result<()> {
    let seed = ctx.seed_for("gradcheck")?;
    let mut out = ctx.header("gradcheck", &format!("seed={seed}"));
    let mut worst: f64 = 0.0;
    let mut all_passed = true;
    for (name, mut net, batch, weights) in gradcheck_suite(seed)? {
        let report = gradient_check(&mut net, &batch, &weights, 1e-5)?;
        worst = worst.max(report.max_rel_err);
        all_passed &= report.passed();
        let _ = writeln!(
            out,
            "case={name} params={} max_rel_err={} passed={}",
            report.num_params,
            report.max_rel_err,
            report.passed()
        );
        println!(
            "gradcheck: {name} max rel err {} ({})",
            report.max_rel_err,
            if report.passed() { "ok" } else { "FAILED" }
        );
    }
    ctx.write_artifact("gradcheck.txt", &out)?;
    if !all_passed {
        return Err(Error::Numeric(format!(
            "gradient check failed, max relative error {worst}"
        )));
    }
    println!("gradcheck: max relative error {worst}");
    Ok(())
}

type GradCase = (
    &'static str,
    VtNet,
    Vec<(Tensor, crate::cvt::MultiLevelLabel)>,
    Vec<f64>,
);

/// Seeded nets covering every layer kind, both losses and the
/// cross-branch averaging path.
fn gradcheck_suite(seed: u64) -> Result<Vec<GradCase>> {
    use crate::cvt::MultiLevelLabel;
    let label = |targets: Vec<usize>| MultiLevelLabel {
        sample_id: "g".into(),
        targets,
    };
    let mut cases: Vec<GradCase> = Vec::new();

    let mlp = VtNet::build(
        VtNetConfig {
            input_shape: vec![3],
            base: vec![LayerSpec::Affine { out_dim: 5 }, LayerSpec::Relu],
            taps: vec![],
            branch_stacks: vec![vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu]],
            head_sizes: vec![3],
            fine_loss_mode: FineLossMode::Literal,
            seed,
        },
        vec![0, 1, 2],
    )?;
    let mlp_batch: Vec<_> = (0..4)
        .map(|i| {
            Ok((
                Tensor::from_vec(&[3], vec![0.3 * i as f64, -0.5, 1.0 + 0.1 * i as f64])?,
                label(vec![i % 3]),
            ))
        })
        .collect::<Result<_>>()?;
    cases.push(("single-branch-mlp", mlp, mlp_batch, vec![1.0]));

    let two = VtNet::build(
        VtNetConfig {
            input_shape: vec![4],
            base: vec![LayerSpec::Affine { out_dim: 6 }, LayerSpec::Relu],
            taps: vec![1],
            branch_stacks: vec![
                vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu],
                vec![LayerSpec::Affine { out_dim: 4 }, LayerSpec::Relu],
            ],
            head_sizes: vec![2, 4],
            fine_loss_mode: FineLossMode::Literal,
            seed: seed.wrapping_add(1),
        },
        vec![0, 0, 1, 1],
    )?;
    let two_batch: Vec<_> = (0..3)
        .map(|i| {
            Ok((
                Tensor::from_vec(&[4], vec![0.2 * i as f64, 0.7, -0.4, 0.9])?,
                label(vec![i % 2, i % 4]),
            ))
        })
        .collect::<Result<_>>()?;
    cases.push(("two-branch-averaging", two, two_batch, vec![0.5, 1.0]));

    let conv = VtNet::build(
        VtNetConfig {
            input_shape: vec![1, 4, 4],
            base: vec![
                LayerSpec::Conv2d { out_channels: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
            ],
            taps: vec![2],
            branch_stacks: vec![
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::Affine { out_dim: 4 },
                    LayerSpec::Relu,
                ],
                vec![
                    LayerSpec::Conv2d { out_channels: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ],
            ],
            head_sizes: vec![2, 4],
            fine_loss_mode: FineLossMode::LogF,
            seed: seed.wrapping_add(2),
        },
        vec![0, 0, 1, 1],
    )?;
    let conv_batch: Vec<_> = (0..2)
        .map(|i| {
            let data: Vec<f64> = (0..16).map(|j| ((i + j) as f64 * 0.37).sin()).collect();
            Ok((Tensor::from_vec(&[1, 4, 4], data)?, label(vec![i % 2, (i + 1) % 4])))
        })
        .collect::<Result<_>>()?;
    cases.push(("conv-pool-logf", conv, conv_batch, vec![1.0, 1.0]));

    Ok(cases)
}
