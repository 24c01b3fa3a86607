//! The graph reachability benchmark: random directed graphs, a BFS oracle,
//! the token serialization, and dataset statistics.
//!
//! A serialized instance is one line of four tab-separated fields:
//!
//! ```text
//! 0 -> 2 # 2 -> 1 #<TAB>0 -> 1<TAB>Yes<TAB>1
//! ```
//!
//! graph tokens, query tokens, the label, and the BFS step (intermediate
//! nodes on the shortest path, `-1` when unreachable).

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ARROW: &str = "->";
pub const DELIMITER: &str = "#";
/// Boundary between graph and query for readers that consume both as one sequence.
pub const SEPARATOR: &str = "|";

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("cannot place {edges} distinct edges on {nodes} nodes")]
    InfeasibleEdgeCount { nodes: usize, edges: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Yes,
    No,
}

impl Label {
    pub fn from_bool(yes: bool) -> Self {
        if yes {
            Label::Yes
        } else {
            Label::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Label::Yes
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Yes => "Yes",
            Label::No => "No",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Yes" => Ok(Label::Yes),
            "No" => Ok(Label::No),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInstance {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub query: (usize, usize),
    pub label: Label,
    pub bfs_step: i64,
}

impl GraphInstance {
    /// Builds an instance, labelling it with [`bfs_oracle`].
    pub fn labelled(num_nodes: usize, edges: Vec<(usize, usize)>, query: (usize, usize)) -> Self {
        let (reachable, bfs_step) = bfs_oracle(&edges, query.0, query.1);
        Self {
            num_nodes,
            edges,
            query,
            label: Label::from_bool(reachable),
            bfs_step,
        }
    }
}

/// `num_edges` distinct directed edges drawn uniformly without replacement
/// from all `num_nodes²` ordered pairs (self-loops included), sorted.
pub fn generate_graph<R: Rng + ?Sized>(
    num_nodes: usize,
    num_edges: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, GraphError> {
    let pairs = num_nodes * num_nodes;
    if num_edges > pairs || num_nodes == 0 {
        return Err(GraphError::InfeasibleEdgeCount {
            nodes: num_nodes,
            edges: num_edges,
        });
    }
    let mut edges: Vec<(usize, usize)> = index::sample(rng, pairs, num_edges)
        .into_iter()
        .map(|i| (i / num_nodes, i % num_nodes))
        .collect();
    edges.sort_unstable();
    Ok(edges)
}

/// Whether `dst` is reachable from `src` by a directed path of at least one
/// edge, and the number of intermediate nodes on a shortest such path
/// (`-1` when unreachable). `src == dst` needs a cycle through `src`.
pub fn bfs_oracle(edges: &[(usize, usize)], src: usize, dst: usize) -> (bool, i64) {
    let n = edges
        .iter()
        .flat_map(|&(u, v)| [u, v])
        .chain([src, dst])
        .max()
        .map_or(0, |m| m + 1);
    let mut adjacency = vec![Vec::new(); n];
    for &(u, v) in edges {
        adjacency[u].push(v);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    queue.push_back((src, 0i64));
    while let Some((u, depth)) = queue.pop_front() {
        for &v in &adjacency[u] {
            if v == dst {
                return (true, depth);
            }
            if !seen[v] {
                seen[v] = true;
                queue.push_back((v, depth + 1));
            }
        }
    }
    (false, -1)
}

/// Token form of an instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Serialized {
    pub graph: Vec<String>,
    pub query: Vec<String>,
    pub label: Label,
}

pub fn serialize(instance: &GraphInstance) -> Serialized {
    let mut graph = Vec::with_capacity(instance.edges.len() * 4);
    for &(u, v) in &instance.edges {
        graph.extend([u.to_string(), ARROW.to_string(), v.to_string(), DELIMITER.to_string()]);
    }
    let (s, d) = instance.query;
    Serialized {
        graph,
        query: vec![s.to_string(), ARROW.to_string(), d.to_string()],
        label: instance.label,
    }
}

/// Inverse of [`serialize`]. `num_nodes` is not recoverable from tokens alone.
pub fn parse(tokens: &Serialized, num_nodes: usize) -> Result<GraphInstance, String> {
    let node = |t: &str| -> Result<usize, String> {
        let id: usize = t.parse().map_err(|_| format!("expected node id, got {t:?}"))?;
        if id < num_nodes {
            Ok(id)
        } else {
            Err(format!("node {id} out of range for {num_nodes} nodes"))
        }
    };
    if !tokens.graph.len().is_multiple_of(4) {
        return Err(format!("graph has {} tokens, not a multiple of 4", tokens.graph.len()));
    }
    let mut edges = Vec::with_capacity(tokens.graph.len() / 4);
    for chunk in tokens.graph.chunks(4) {
        if chunk[1] != ARROW || chunk[3] != DELIMITER {
            return Err(format!("malformed edge {chunk:?}"));
        }
        edges.push((node(&chunk[0])?, node(&chunk[2])?));
    }
    match tokens.query.as_slice() {
        [s, arrow, d] if arrow == ARROW => {
            let instance = GraphInstance::labelled(num_nodes, edges, (node(s)?, node(d)?));
            if instance.label != tokens.label {
                return Err(format!("label {} disagrees with the graph", tokens.label));
            }
            Ok(instance)
        }
        other => Err(format!("malformed query {other:?}")),
    }
}

pub fn to_line(instance: &GraphInstance) -> String {
    let s = serialize(instance);
    format!(
        "{}\t{}\t{}\t{}",
        s.graph.join(" "),
        s.query.join(" "),
        s.label,
        instance.bfs_step
    )
}

pub fn parse_line(line: &str, num_nodes: usize) -> Result<GraphInstance, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [graph, query, label, step] = fields.as_slice() else {
        return Err(format!("expected 4 tab-separated fields, got {}", fields.len()));
    };
    let tokens = Serialized {
        graph: graph.split_whitespace().map(str::to_string).collect(),
        query: query.split_whitespace().map(str::to_string).collect(),
        label: label.parse()?,
    };
    let instance = parse(&tokens, num_nodes)?;
    let step: i64 = step.parse().map_err(|_| format!("bad bfs step {step:?}"))?;
    if step != instance.bfs_step {
        return Err(format!("bfs step {step} disagrees with the graph ({})", instance.bfs_step));
    }
    Ok(instance)
}

pub fn write_instances(path: &Path, instances: &[GraphInstance]) -> Result<(), GraphError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        out.write_all(to_line(inst).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path, num_nodes: usize) -> Result<Vec<GraphInstance>, GraphError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_line(&line, num_nodes).map_err(|msg| GraphError::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

/// Symbol table: node ids first, then the structural symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    num_nodes: usize,
    with_separator: bool,
}

impl Vocab {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            with_separator: false,
        }
    }

    pub fn with_separator(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            with_separator: true,
        }
    }

    pub fn len(&self) -> usize {
        self.num_nodes + 2 + usize::from(self.with_separator)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn arrow(&self) -> usize {
        self.num_nodes
    }

    pub fn delimiter(&self) -> usize {
        self.num_nodes + 1
    }

    pub fn separator(&self) -> Option<usize> {
        self.with_separator.then_some(self.num_nodes + 2)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        match token {
            ARROW => Some(self.arrow()),
            DELIMITER => Some(self.delimiter()),
            SEPARATOR => self.separator(),
            t => t.parse().ok().filter(|&n| n < self.num_nodes),
        }
    }

    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.num_nodes).map(|i| i.to_string()).collect();
        out.push(ARROW.into());
        out.push(DELIMITER.into());
        if self.with_separator {
            out.push(SEPARATOR.into());
        }
        out
    }

    /// Graph token ids, straight from the edge list.
    pub fn graph_ids(&self, instance: &GraphInstance) -> Vec<usize> {
        instance
            .edges
            .iter()
            .flat_map(|&(u, v)| [u, self.arrow(), v, self.delimiter()])
            .collect()
    }

    pub fn query_ids(&self, instance: &GraphInstance) -> Vec<usize> {
        vec![instance.query.0, self.arrow(), instance.query.1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Small,
    Large,
}

impl Variant {
    pub fn num_nodes(self) -> usize {
        match self {
            Variant::Small => 9,
            Variant::Large => 18,
        }
    }

    pub fn num_edges(self) -> usize {
        match self {
            Variant::Small => 16,
            Variant::Large => 32,
        }
    }

    /// Upper edge of the last bounded reachable-step bin.
    fn last_bin_end(self) -> i64 {
        match self {
            Variant::Small => 9,
            Variant::Large => 13,
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Variant::Small),
            "large" => Ok(Variant::Large),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Small => "small",
            Variant::Large => "large",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub variant: Variant,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(variant: Variant, train_count: usize, test_count: usize, seed: u64) -> Self {
        Self {
            variant,
            num_nodes: variant.num_nodes(),
            num_edges: variant.num_edges(),
            train_count,
            test_count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if (self.num_nodes, self.num_edges) != (self.variant.num_nodes(), self.variant.num_edges()) {
            return Err(GraphError::InvalidSpec(format!(
                "{} graphs have {} nodes and {} edges",
                self.variant,
                self.variant.num_nodes(),
                self.variant.num_edges()
            )));
        }
        if self.num_nodes < 2 {
            return Err(GraphError::InvalidSpec("queries need two distinct nodes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Generator for instance `index` of `split`: an independent ChaCha stream
/// per instance, so output does not depend on generation order.
pub fn instance_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag: u64 = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    rng.set_stream((tag << 48) | index as u64);
    rng
}

/// One instance: a fresh graph and a uniformly drawn query with `src != dst`.
pub fn generate_instance<R: Rng + ?Sized>(num_nodes: usize, num_edges: usize, rng: &mut R) -> Result<GraphInstance, GraphError> {
    let edges = generate_graph(num_nodes, num_edges, rng)?;
    let src = rng.gen_range(0..num_nodes);
    let mut dst = rng.gen_range(0..num_nodes - 1);
    if dst >= src {
        dst += 1;
    }
    Ok(GraphInstance::labelled(num_nodes, edges, (src, dst)))
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<GraphInstance>, GraphError> {
    spec.validate()?;
    let count = match split {
        Split::Train => spec.train_count,
        Split::Test => spec.test_count,
    };
    (0..count)
        .map(|i| generate_instance(spec.num_nodes, spec.num_edges, &mut instance_rng(spec.seed, split, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinShare {
    pub bin: String,
    pub count: usize,
    pub percent: f64,
}

/// Reachability statistics under two readings of "reachable step": the number
/// of edges on the shortest path, and the number of intermediate nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub no_reach_percent: f64,
    pub edge_count_bins: Vec<BinShare>,
    pub intermediate_node_bins: Vec<BinShare>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub spec: DatasetSpec,
    pub train: SplitStats,
    pub test: SplitStats,
}

impl SplitStats {
    pub fn compute(instances: &[GraphInstance], variant: Variant) -> Self {
        let last = variant.last_bin_end();
        let mut ranges: Vec<(String, i64, i64)> = vec![("1-3".into(), 1, 3), ("4-6".into(), 4, 6)];
        ranges.push((format!("7-{last}"), 7, last));
        ranges.push((format!(">{last}"), last + 1, i64::MAX));

        let share = |bin: String, count: usize| BinShare {
            percent: percent(count, instances.len()),
            bin,
            count,
        };
        let binned = |key: &dyn Fn(i64) -> i64, extra_zero: bool| -> Vec<BinShare> {
            let reachable: Vec<i64> = instances.iter().filter(|i| i.bfs_step >= 0).map(|i| key(i.bfs_step)).collect();
            let mut bins = vec![share("no_reach".into(), instances.len() - reachable.len())];
            if extra_zero {
                bins.push(share("0".into(), reachable.iter().filter(|&&k| k == 0).count()));
            }
            for (name, lo, hi) in &ranges {
                bins.push(share(name.clone(), reachable.iter().filter(|&&k| (*lo..=*hi).contains(&k)).count()));
            }
            bins
        };
        let no_reach = instances.iter().filter(|i| i.label == Label::No).count();
        Self {
            count: instances.len(),
            no_reach_percent: percent(no_reach, instances.len()),
            edge_count_bins: binned(&|s| s + 1, false),
            intermediate_node_bins: binned(&|s| s, true),
        }
    }

    pub fn edge_bin(&self, name: &str) -> Option<f64> {
        self.edge_count_bins.iter().find(|b| b.bin == name).map(|b| b.percent)
    }

    pub fn intermediate_bin(&self, name: &str) -> Option<f64> {
        self.intermediate_node_bins.iter().find(|b| b.bin == name).map(|b| b.percent)
    }
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<GraphInstance>,
    pub test: Vec<GraphInstance>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self, GraphError> {
        Ok(Self {
            spec: spec.clone(),
            train: generate_split(spec, Split::Train)?,
            test: generate_split(spec, Split::Test)?,
        })
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            spec: self.spec.clone(),
            train: SplitStats::compute(&self.train, self.spec.variant),
            test: SplitStats::compute(&self.test, self.spec.variant),
        }
    }

    /// Writes `train.tsv`, `test.tsv` and `stats.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetStats, GraphError> {
        fs::create_dir_all(dir)?;
        write_instances(&dir.join(TRAIN_FILE), &self.train)?;
        write_instances(&dir.join(TEST_FILE), &self.test)?;
        let stats = self.stats();
        let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
        fs::write(dir.join(STATS_FILE), json + "\n")?;
        Ok(stats)
    }

    /// Reads a directory written by [`Dataset::write`].
    pub fn read(dir: &Path) -> Result<Self, GraphError> {
        let stats: DatasetStats = serde_json::from_str(&fs::read_to_string(dir.join(STATS_FILE))?)
            .map_err(|e| GraphError::Parse { line: e.line(), msg: e.to_string() })?;
        let n = stats.spec.num_nodes;
        Ok(Self {
            train: read_instances(&dir.join(TRAIN_FILE), n)?,
            test: read_instances(&dir.join(TEST_FILE), n)?,
            spec: stats.spec,
        })
    }
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const STATS_FILE: &str = "stats.json";
