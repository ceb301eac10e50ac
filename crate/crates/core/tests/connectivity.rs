use sfrnet::analysis::{
    aggregate_layers, connectivity, export_heatmap, from_csv, group_connectivity, to_csv, to_pgm, Aggregation, Cell,
    ConnectivityMatrix, Granularity,
};
use sfrnet::network::{Network, NetworkConfig};

fn condensed_toy() -> Network {
    let mut net = Network::new(&NetworkConfig::toy(), 11).unwrap();
    while !net.layers().all(|l| l.lgc.is_fully_condensed()) {
        net.prune_lgc_stage().unwrap();
    }
    net
}

/// Mean and sum of |w| over unmasked weights, computed straight from each
/// layer's filters and mask, source by source.
fn direct_per_layer(net: &Network) -> Vec<Vec<Option<(f64, f64)>>> {
    let cfg = net.config();
    let mut widths = vec![cfg.stem.channels];
    for b in &cfg.blocks {
        widths.extend(std::iter::repeat_n(b.growth, b.layers));
    }
    let layers: Vec<_> = net.layers().collect();
    let mut out = vec![vec![None; layers.len()]; widths.len() - 1];
    for (t, layer) in layers.iter().enumerate() {
        let w = &layer.lgc.weights().data;
        let mask = layer.lgc.mask();
        let inputs = layer.lgc.in_channels();
        let mut start = 0;
        for s in 0..=t {
            let (mut sum, mut n) = (0.0f64, 0usize);
            for o in 0..layer.lgc.out_channels() {
                for j in start..start + widths[s] {
                    if mask[o * inputs + j] != 0.0 {
                        sum += w[o * inputs + j].abs() as f64;
                        n += 1;
                    }
                }
            }
            start += widths[s];
            out[s][t] = Some(if n == 0 { (f64::NAN, 0.0) } else { (sum / n as f64, sum) });
        }
    }
    out
}

#[test]
fn per_layer_matches_direct_computation() {
    let net = condensed_toy();
    let mean = connectivity(&net, Granularity::PerLayer, Aggregation::Mean);
    let sum = connectivity(&net, Granularity::PerLayer, Aggregation::Sum);
    let direct = direct_per_layer(&net);
    assert_eq!(mean.shape(), (direct.len(), direct[0].len()));
    let mut live_cells = 0;
    for (r, row) in direct.iter().enumerate() {
        for (c, expected) in row.iter().enumerate() {
            match (expected, mean.get(r, c), sum.get(r, c)) {
                (None, Cell::Undefined, Cell::Undefined) => {}
                (Some((m, _)), Cell::Pruned, Cell::Pruned) => assert!(m.is_nan()),
                (Some((m, s)), Cell::Live { value: a, .. }, Cell::Live { value: b, .. }) => {
                    assert!((a - m).abs() <= 1e-9 * m.max(1.0), "mean at {r},{c}: {a} vs {m}");
                    assert!((b - s).abs() <= 1e-9 * s.max(1.0), "sum at {r},{c}: {b} vs {s}");
                    live_cells += 1;
                }
                other => panic!("cell {r},{c} disagrees: {other:?}"),
            }
        }
    }
    assert!(live_cells > 0);
}

#[test]
fn per_layer_is_aggregation_of_groups() {
    let net = condensed_toy();
    let groups = group_connectivity(&net);
    let layers = connectivity(&net, Granularity::PerLayer, Aggregation::Mean);
    assert_eq!(aggregate_layers(&groups, Aggregation::Mean), layers);
    assert_eq!(groups.rows, layers.rows);
    let first_cols: Vec<_> = groups.cols.iter().filter(|c| c.starts_with("b0.l0/")).collect();
    assert_eq!(first_cols.len(), net.config().groups);
    // The stem feeds every layer; the lower triangle is undefined.
    assert!((0..layers.cols.len()).all(|c| layers.get(0, c) != Cell::Undefined));
    for r in 1..layers.rows.len() {
        for c in 0..r {
            assert_eq!(layers.get(r, c), Cell::Undefined);
        }
    }
}

#[test]
fn live_weight_counts_add_up() {
    let net = condensed_toy();
    let groups = group_connectivity(&net);
    let total: usize = groups
        .cells
        .iter()
        .map(|c| match c {
            Cell::Live { live, .. } => *live,
            _ => 0,
        })
        .sum();
    assert_eq!(total, net.live_lgc());
}

fn single(cell: Cell) -> ConnectivityMatrix {
    ConnectivityMatrix {
        rows: vec!["stem".into()],
        cols: vec!["b0.l0".into()],
        cells: vec![cell],
        granularity: Granularity::PerLayer,
        aggregation: Some(Aggregation::Mean),
    }
}

#[test]
fn degenerate_heatmaps() {
    let one = to_pgm(&single(Cell::Live { value: 0.3, live: 2 }));
    assert_eq!(one, b"P5\n1 1\n255\n\xff");
    let pruned = to_pgm(&single(Cell::Pruned));
    assert_eq!(pruned, b"P5\n1 1\n255\n\x00");
    assert_eq!(to_csv(&single(Cell::Pruned)).lines().nth(2), Some("stem,NA"));
}

#[test]
fn golden_pgm_and_csv() {
    let m = ConnectivityMatrix {
        rows: vec!["stem".into(), "b0.l0".into()],
        cols: vec!["b0.l0".into(), "b0.l1".into()],
        cells: vec![
            Cell::Live { value: 0.25, live: 1 },
            Cell::Pruned,
            Cell::Live { value: 1.0, live: 1 },
            Cell::Live { value: 0.5, live: 1 },
        ],
        granularity: Granularity::PerLayer,
        aggregation: Some(Aggregation::Mean),
    };
    assert_eq!(to_pgm(&m), include_bytes!("golden/heatmap_2x2.pgm"));
    let csv = to_csv(&m);
    assert_eq!(
        csv,
        "# granularity=per_layer;aggregation=mean\nsource,b0.l0,b0.l1\nstem,0.25,NA\nb0.l0,1,0.5\n"
    );
    let back = from_csv(&csv).unwrap();
    assert_eq!((back.granularity, back.aggregation), (Granularity::PerLayer, Some(Aggregation::Mean)));

    let dir = tempfile::tempdir().unwrap();
    let (csv_path, pgm_path) = export_heatmap(&m, &dir.path().join("heat")).unwrap();
    assert_eq!(std::fs::read_to_string(csv_path).unwrap(), csv);
    assert_eq!(std::fs::read(pgm_path).unwrap(), to_pgm(&m));
}
