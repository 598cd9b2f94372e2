//! Command-line front end: load a graph (or generate one from a seed), then
//! validate, infer shapes, optimise, plan memory, evaluate, run the pebble
//! oracle, export DOT, or print memory statistics.
//!
//! Exit codes: 0 ok, 1 domain violation, 2 usage/parse error.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lazygraph::eval::{evaluate_with, DelayRegistry, EvalOptions};
use lazygraph::json::{self, InputsFile};
use lazygraph::pebble::{self, PebbleDag};
use lazygraph::{
    gen, infer_shapes, optimise, plan, AllocationPlan, Graph, NodeId, Shape, ShapeTable, Tensor,
};

#[derive(Parser)]
#[command(
    name = "lazygraph",
    version,
    about = "Static lazy computation-graph engine for dense tensors"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Source {
    /// Graph file in the JSON graph format; `-` reads standard input.
    graph: Option<PathBuf>,
    /// Generate a deterministic random graph from this seed instead.
    #[arg(long, conflicts_with = "graph")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check graph invariants and print any violations.
    Validate(Source),
    /// Print the inferred shape table (id, op, shape, bytes).
    Shapes(Source),
    /// Rewrite the graph to fixpoint: identities, constant folding, fusions.
    Optimise {
        #[command(flatten)]
        source: Source,
        /// Write the rewritten graph here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the rewritten graph in DOT form to this path.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Compute the block-sharing memory plan.
    Plan {
        #[command(flatten)]
        source: Source,
        /// Write the plan here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the graph and print the output tensors.
    Eval {
        #[command(flatten)]
        source: Source,
        /// JSON map of node id to tensor literal {"shape": [...], "data": [...]}.
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Exact pebble-game analysis of the graph's topology (small graphs).
    Pebble {
        #[command(flatten)]
        source: Source,
        /// Print all non-dominated (space, time) pairs (the default).
        #[arg(long)]
        frontier: bool,
        /// Print the minimal time for this pebble budget instead.
        #[arg(long = "space-budget", conflicts_with = "frontier")]
        space_budget: Option<usize>,
    },
    /// Write the graph in DOT form.
    Dot {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory statistics: planned pool versus one-block-per-node baseline.
    Stats(Source),
}

enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    fn domain(e: impl std::fmt::Display) -> Self {
        CliError::Domain(e.to_string())
    }
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
}

const GENERATED_BUDGET: usize = 40;

fn load(source: &Source) -> Result<(Graph, BTreeMap<NodeId, Shape>), CliError> {
    if let Some(seed) = source.seed {
        let outcome = gen::random_graph(seed, GENERATED_BUDGET);
        let mut graph = outcome.graph;
        for (id, t) in outcome.input_values {
            graph.set_value(id, t).expect("generated vars accept values");
        }
        return Ok((graph, outcome.input_shapes));
    }
    let path = source
        .graph
        .as_ref()
        .ok_or_else(|| CliError::usage("give a graph file (or `-` for stdin), or --seed N"))?;
    let text = if path == Path::new("-") {
        let mut buf = String::new();
        std::io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| CliError::usage(format!("reading stdin: {e}")))?;
        buf
    } else {
        std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    };
    json::parse_graph_json(&text).map_err(CliError::usage)
}

fn shapes_for(graph: &Graph, hints: &BTreeMap<NodeId, Shape>) -> Result<ShapeTable, CliError> {
    infer_shapes(graph, hints).map_err(CliError::domain)
}

fn plan_for(graph: &Graph, table: &ShapeTable) -> Result<AllocationPlan, CliError> {
    let order = graph.topological_order().map_err(CliError::domain)?;
    plan(graph, &order, &table.sizes()).map_err(CliError::domain)
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Host functions available to `Delay` nodes from the command line.
fn builtin_registry() -> DelayRegistry {
    let mut reg = DelayRegistry::new();
    reg.register("identity", |t: &Tensor| t.clone());
    reg.register("square", |t: &Tensor| t.map(|x| x * x));
    reg.register("relu", |t: &Tensor| t.map(|x| x.max(0.0)));
    reg
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.cmd {
        Cmd::Validate(source) => {
            let (graph, _) = load(&source)?;
            let violations = graph.validate();
            if violations.is_empty() {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            } else {
                for v in violations {
                    println!("{v}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Cmd::Shapes(source) => {
            let (graph, hints) = load(&source)?;
            let table = shapes_for(&graph, &hints)?;
            for node in graph.nodes() {
                let shape = table.get(node.id).expect("inference is total");
                println!("{}\t{}\t{}\t{}", node.id, node.op.name(), shape, shape.size_bytes());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Optimise { source, out, dot } => {
            let (graph, hints) = load(&source)?;
            let table = shapes_for(&graph, &hints)?;
            let (rewritten, report) = optimise(&graph, &table).map_err(CliError::domain)?;
            eprintln!("pass\tremoved\tfused\tfolded\trewrites");
            eprintln!(
                "{}\t{}\t{}\t{}\t{}",
                report.pass,
                report.nodes_removed,
                report.nodes_fused,
                report.constants_folded,
                report.rewrites
            );
            if let Some(path) = dot {
                emit(&rewritten.to_dot(), Some(&path))?;
            }
            let file = json::graph_to_file(&rewritten, &hints);
            let text = json::to_canonical_json(&file).map_err(CliError::domain)?;
            emit(&text, out.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Plan { source, out } => {
            let (graph, hints) = load(&source)?;
            let table = shapes_for(&graph, &hints)?;
            let plan = plan_for(&graph, &table)?;
            let text =
                json::to_canonical_json(&json::plan_to_file(&plan)).map_err(CliError::domain)?;
            if out.is_some() {
                eprintln!(
                    "pool blocks {}, pool bytes {}, peak bytes {}",
                    plan.pool_block_count(),
                    plan.pool_bytes,
                    plan.peak_bytes
                );
            }
            emit(&text, out.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { source, inputs } => {
            let (graph, hints) = load(&source)?;
            let input_values: InputsFile = match inputs {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                    serde_json::from_str(&text).map_err(CliError::usage)?
                }
                None => BTreeMap::new(),
            };
            let table = shapes_for(&graph, &hints)?;
            let plan = plan_for(&graph, &table)?;
            let values = evaluate_with(
                &graph,
                &plan,
                &input_values,
                &builtin_registry(),
                &EvalOptions::default(),
            )
            .map_err(CliError::domain)?;
            let outputs: BTreeMap<NodeId, Tensor> = values
                .into_iter()
                .filter(|(id, _)| graph.is_output(*id))
                .collect();
            let text = json::to_canonical_json(&outputs).map_err(CliError::domain)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Pebble { source, frontier: _, space_budget } => {
            let (graph, _) = load(&source)?;
            let (dag, _) = PebbleDag::from_graph(&graph).map_err(CliError::domain)?;
            let cap = pebble::default_time_cap(dag.vertex_count());
            match space_budget {
                Some(budget) => {
                    match pebble::min_time_with_space(&dag, budget, cap)
                        .map_err(CliError::domain)?
                    {
                        Some(strategy) => {
                            println!("{}", strategy.time);
                            Ok(ExitCode::SUCCESS)
                        }
                        None => Err(CliError::Domain(format!(
                            "no strategy with {budget} pebbles within {cap} placements"
                        ))),
                    }
                }
                None => {
                    let mut pairs =
                        pebble::pareto_frontier(&dag, cap).map_err(CliError::domain)?;
                    pairs.sort_by_key(|&(_, t)| t);
                    let line = pairs
                        .iter()
                        .map(|(s, t)| format!("({s},{t})"))
                        .collect::<Vec<_>>()
                        .join(" ");
                    println!("{line}");
                    Ok(ExitCode::SUCCESS)
                }
            }
        }
        Cmd::Dot { source, out } => {
            let (graph, _) = load(&source)?;
            emit(&graph.to_dot(), out.as_ref())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Stats(source) => {
            let (graph, hints) = load(&source)?;
            let table = shapes_for(&graph, &hints)?;
            let plan = plan_for(&graph, &table)?;
            let naive = plan.naive_pool_bytes(&table.sizes());
            let ratio = if naive == 0 { 1.0 } else { plan.pool_bytes as f64 / naive as f64 };
            println!("nodes\t{}", graph.node_count());
            println!("pool blocks\t{}", plan.pool_block_count());
            println!("pool bytes\t{}", plan.pool_bytes);
            println!("external bytes\t{}", plan.external_bytes);
            println!("peak bytes\t{}", plan.peak_bytes);
            println!("naive pool bytes\t{naive}");
            println!("pool/naive ratio\t{ratio:.4}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Domain(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
