//! Connection strength between the features a layer reads and the
//! learned-group-convolution filter groups that read them.

use serde::{Deserialize, Serialize};

use crate::network::{Network, SegmentOwner};

/// One matrix entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    /// Strength over `live` surviving weights.
    Live { value: f64, live: usize },
    /// Every weight between the pair has been pruned.
    Pruned,
    /// The source is produced at or after the target, so no weights exist.
    Undefined,
}

impl Cell {
    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Live { value, .. } => Some(*value),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerGroup,
    PerLayer,
}

/// How per-group cells are merged into one per-layer cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean absolute value over all live weights between the two layers.
    #[default]
    Mean,
    /// L1 norm of the live weights between the two layers.
    Sum,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
        }
    }
}

/// Rows are source segments (the stem, then each layer that feeds a later
/// one); columns are target layers, or (target layer, filter group) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Cell>,
    pub granularity: Granularity,
    /// Set for per-layer matrices.
    pub aggregation: Option<Aggregation>,
}

impl ConnectivityMatrix {
    pub fn get(&self, r: usize, c: usize) -> Cell {
        self.cells[r * self.cols.len() + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    /// `key=value` pairs describing how the matrix was computed.
    pub fn metadata(&self) -> String {
        let g = match self.granularity {
            Granularity::PerGroup => "per_group",
            Granularity::PerLayer => "per_layer",
        };
        match self.aggregation {
            Some(a) => format!("granularity={g};aggregation={}", a.name()),
            None => format!("granularity={g};value=mean_abs_live_weight"),
        }
    }
}

fn owner_label(o: SegmentOwner) -> String {
    match o {
        SegmentOwner::Stem => "stem".into(),
        SegmentOwner::Layer { block, layer } => format!("b{block}.l{layer}"),
    }
}

/// Per-group connection strengths of every dense layer.
pub fn group_connectivity(net: &Network) -> ConnectivityMatrix {
    let cfg = net.config();
    let mut owners = vec![(SegmentOwner::Stem, cfg.stem.channels)];
    for (b, block) in cfg.blocks.iter().enumerate() {
        for l in 0..block.layers {
            owners.push((SegmentOwner::Layer { block: b, layer: l }, block.growth));
        }
    }
    let layers: Vec<_> = net.layers().collect();
    // the last layer feeds no learned group convolution
    let sources = &owners[..owners.len() - 1];
    let mut cols = Vec::new();
    for (t, layer) in layers.iter().enumerate() {
        for g in 0..layer.lgc.groups() {
            cols.push(format!("{}/g{g}", owner_label(owners[t + 1].0)));
        }
    }
    let width = cols.len();
    let mut cells = vec![Cell::Undefined; sources.len() * width];
    let mut col = 0;
    for (t, layer) in layers.iter().enumerate() {
        let lgc = &layer.lgc;
        let w = &lgc.weights().data;
        let inputs = lgc.in_channels();
        let rows = lgc.group_rows();
        for g in 0..lgc.groups() {
            let live_cols = lgc.live_columns(g);
            let mut start = 0;
            // layer t reads sources 0..=t
            for (s, &(_, channels)) in owners.iter().enumerate().take(t + 1) {
                let range = start..start + channels;
                start += channels;
                let mut l1 = 0.0f64;
                let mut live = 0;
                for &j in live_cols.iter().filter(|j| range.contains(j)) {
                    for o in g * rows..(g + 1) * rows {
                        l1 += w[o * inputs + j].abs() as f64;
                        live += 1;
                    }
                }
                cells[s * width + col] = if live == 0 {
                    Cell::Pruned
                } else {
                    Cell::Live {
                        value: l1 / live as f64,
                        live,
                    }
                };
            }
            col += 1;
        }
    }
    ConnectivityMatrix {
        rows: sources.iter().map(|(o, _)| owner_label(*o)).collect(),
        cols,
        cells,
        granularity: Granularity::PerGroup,
        aggregation: None,
    }
}

/// Merges each target layer's group columns into one column.
pub fn aggregate_layers(groups: &ConnectivityMatrix, how: Aggregation) -> ConnectivityMatrix {
    let mut cols: Vec<String> = Vec::new();
    let mut spans: Vec<Vec<usize>> = Vec::new();
    for (c, label) in groups.cols.iter().enumerate() {
        let layer = label.split('/').next().unwrap_or(label).to_string();
        if cols.last() != Some(&layer) {
            cols.push(layer);
            spans.push(Vec::new());
        }
        spans.last_mut().expect("pushed above").push(c);
    }
    let mut cells = Vec::with_capacity(groups.rows.len() * cols.len());
    for r in 0..groups.rows.len() {
        for span in &spans {
            let parts: Vec<Cell> = span.iter().map(|&c| groups.get(r, c)).collect();
            let cell = if parts.iter().all(|c| *c == Cell::Undefined) {
                Cell::Undefined
            } else {
                let (l1, live) = parts.iter().fold((0.0, 0), |(s, n), c| match c {
                    Cell::Live { value, live } => (s + value * *live as f64, n + live),
                    _ => (s, n),
                });
                match (live, how) {
                    (0, _) => Cell::Pruned,
                    (_, Aggregation::Mean) => Cell::Live { value: l1 / live as f64, live },
                    (_, Aggregation::Sum) => Cell::Live { value: l1, live },
                }
            };
            cells.push(cell);
        }
    }
    ConnectivityMatrix {
        rows: groups.rows.clone(),
        cols,
        cells,
        granularity: Granularity::PerLayer,
        aggregation: Some(how),
    }
}

pub fn connectivity(net: &Network, granularity: Granularity, how: Aggregation) -> ConnectivityMatrix {
    let groups = group_connectivity(net);
    match granularity {
        Granularity::PerGroup => groups,
        Granularity::PerLayer => aggregate_layers(&groups, how),
    }
}
