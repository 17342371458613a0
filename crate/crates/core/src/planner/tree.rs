use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::tools::ToolInvocation;

/// `w/n + c·sqrt(ln N / n)`; an unvisited node scores +∞.
pub fn uct_value(w: f64, n: u64, total: u64, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let n = n as f64;
    let ln_total = (total.max(1) as f64).ln();
    w / n + c * (ln_total / n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    /// Executed, may be expanded further.
    Live,
    /// Created by expansion, not yet executed.
    Pending,
    /// Invalid action or tool error.
    Failed,
    /// Judged useless and demoted.
    Reflected,
    /// Confirmed a new cause.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeAction {
    Tool { call: ToolInvocation },
    Analysis { text: String },
}

impl NodeAction {
    pub fn tool(&self) -> Option<&ToolInvocation> {
        match self {
            Self::Tool { call } => Some(call),
            Self::Analysis { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Tool { call } => call.to_string(),
            Self::Analysis { text } => text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DiagnosisNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<NodeAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    /// Confirmed causes backpropagated from the subtree; −1 on failure.
    pub w: f64,
    pub n: u64,
    /// Causes found at or below this node.
    pub detected_causes: BTreeSet<String>,
    pub status: NodeStatus,
    /// Metric this branch investigates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<String>,
    /// Metrics the observation here reported abnormal.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub abnormal_metrics: Vec<String>,
    pub judged: bool,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub c: f64,
    pub stall_threshold: u32,
    pub max_steps: usize,
    pub max_children: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            c: 1.414,
            stall_threshold: 5,
            max_steps: 64,
            max_children: 3,
        }
    }
}

/// Why selection found nothing to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoCandidates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisTree {
    pub nodes: Vec<DiagnosisNode>,
    pub root: usize,
    /// Total simulations (N).
    pub simulations: u64,
    pub config: TreeConfig,
    pub stall_counter: u32,
    /// Metrics some branch already targets.
    pub investigated: BTreeSet<String>,
    pub last_executed: Option<usize>,
}

impl DiagnosisTree {
    pub fn new(config: TreeConfig) -> Self {
        let root = DiagnosisNode {
            id: 0,
            parent: None,
            depth: 0,
            action: None,
            observation: None,
            w: 0.0,
            n: 0,
            detected_causes: BTreeSet::new(),
            status: NodeStatus::Live,
            focus: None,
            abnormal_metrics: Vec::new(),
            judged: true,
            children: Vec::new(),
        };
        Self {
            nodes: vec![root],
            root: 0,
            simulations: 0,
            config,
            stall_counter: 0,
            investigated: BTreeSet::new(),
            last_executed: None,
        }
    }

    pub fn node(&self, id: usize) -> &DiagnosisNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut DiagnosisNode {
        &mut self.nodes[id]
    }

    pub fn uct(&self, id: usize) -> f64 {
        let node = &self.nodes[id];
        uct_value(node.w, node.n, self.simulations, self.config.c)
    }

    /// Root first, `id` last.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn add_child(&mut self, parent: usize, focus: Option<String>) -> usize {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(DiagnosisNode {
            id,
            parent: Some(parent),
            depth,
            action: None,
            observation: None,
            w: 0.0,
            n: 0,
            detected_causes: BTreeSet::new(),
            status: NodeStatus::Pending,
            focus,
            abnormal_metrics: Vec::new(),
            judged: false,
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    fn has_room(&self, id: usize) -> bool {
        self.nodes[id].children.len() < self.config.max_children
    }

    fn selectable(&self, node: &DiagnosisNode) -> bool {
        if node.id == self.root {
            return node.children.is_empty();
        }
        matches!(node.status, NodeStatus::Live | NodeStatus::Pending | NodeStatus::Reflected)
            && (node.status == NodeStatus::Pending || self.has_room(node.id))
    }

    /// Argmax UCT over selectable nodes; ties go to the earliest node.
    pub fn best_by_uct(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for node in self.nodes.iter().filter(|n| self.selectable(n)) {
            let score = self.uct(node.id);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((node.id, score));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Node to execute next. Pending nodes run in place; picking an executed
    /// node opens a fresh child under it.
    ///
    /// Expansion comes first: if the last step surfaced abnormal metrics no
    /// branch targets yet, up to `max_children` children are opened for
    /// them. Otherwise a successful tool call is followed up on the same
    /// branch. Otherwise the best node by UCT is taken.
    pub fn select_node(&mut self) -> Result<usize, NoCandidates> {
        if let Some(last) = self.last_executed {
            let node = &self.nodes[last];
            let fresh: Vec<String> = node
                .abnormal_metrics
                .iter()
                .filter(|m| !self.investigated.contains(*m))
                .cloned()
                .collect();
            let room = self.config.max_children.saturating_sub(node.children.len());
            if !fresh.is_empty() && room > 0 && node.status != NodeStatus::Failed {
                let mut first = None;
                for metric in fresh.into_iter().take(room) {
                    self.investigated.insert(metric.clone());
                    let id = self.add_child(last, Some(metric));
                    first.get_or_insert(id);
                }
                return Ok(first.expect("at least one child"));
            }
            let followed_tool = node.status == NodeStatus::Live
                && node.action.as_ref().is_some_and(|a| a.tool().is_some());
            if followed_tool && room > 0 {
                let focus = node.focus.clone();
                return Ok(self.add_child(last, focus));
            }
        }
        let id = self.best_by_uct().ok_or(NoCandidates)?;
        if self.nodes[id].status == NodeStatus::Pending {
            Ok(id)
        } else {
            let focus = self.nodes[id].focus.clone();
            Ok(self.add_child(id, focus))
        }
    }

    /// One simulation through `id`: n + 1 on every path node and N + 1.
    pub fn record_visit(&mut self, id: usize) {
        for p in self.path(id) {
            self.nodes[p].n += 1;
        }
        self.simulations += 1;
        self.last_executed = Some(id);
    }

    /// A new confirmed cause at `id`: w + 1 along the path, cause recorded
    /// on every path node.
    pub fn backpropagate_cause(&mut self, id: usize, causes: &[String]) {
        for p in self.path(id) {
            let node = &mut self.nodes[p];
            node.w += 1.0;
            node.detected_causes.extend(causes.iter().cloned());
        }
    }

    pub fn fail(&mut self, id: usize) {
        let node = &mut self.nodes[id];
        node.status = NodeStatus::Failed;
        node.w = -1.0;
    }

    /// Solves for `w` so the node's UCT equals its parent's, then marks it
    /// reflected. Returns false for the root or an unvisited node.
    pub fn demote(&mut self, id: usize) -> bool {
        let Some(parent) = self.nodes[id].parent else {
            return false;
        };
        let n = self.nodes[id].n;
        if n == 0 {
            return false;
        }
        let target = self.uct(parent);
        let explore = self.config.c * ((self.simulations.max(1) as f64).ln() / n as f64).sqrt();
        let node = &mut self.nodes[id];
        node.w = n as f64 * (target - explore);
        node.status = NodeStatus::Reflected;
        true
    }

    pub fn detected_causes(&self) -> &BTreeSet<String> {
        &self.nodes[self.root].detected_causes
    }

    pub fn executed_steps(&self) -> u64 {
        self.simulations
    }

    /// JSON export: nodes with their current UCT, parent→child edges, and
    /// search statistics. Infinite UCT is written as null.
    pub fn trace(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                let mut v = serde_json::to_value(n).expect("node serializes");
                let uct = self.uct(n.id);
                v["uct"] = if uct.is_finite() { json!(uct) } else { Value::Null };
                v
            })
            .collect();
        let edges: Vec<[usize; 2]> = self
            .nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| [p, n.id]))
            .collect();
        json!({
            "nodes": nodes,
            "edges": edges,
            "simulations": self.simulations,
            "c": self.config.c,
            "stall_counter": self.stall_counter,
            "stall_threshold": self.config.stall_threshold,
            "detected_causes": self.detected_causes(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
