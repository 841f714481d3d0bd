use std::path::Path;

use serde::Serialize;

use plaquenet::connectome::{invasion_events, invasion_order, laplacian, NetworkModel};
use plaquenet::solver::integrate;
use plaquenet::therapy::{apply_drug, boost_clearance};

use crate::config::{Loaded, RunConfig};
use crate::output::{integration_config, num, write_json, StatsSummary};
use crate::CliError;

#[derive(Serialize)]
#[allow(non_snake_case)]
struct Summary<'a> {
    command: &'static str,
    n_nodes: usize,
    n_edges: usize,
    algebraic_connectivity: f64,
    seed_node: usize,
    threshold_M: f64,
    invaded: usize,
    first_invasion_h: Option<f64>,
    last_invasion_h: Option<f64>,
    final_total_M: f64,
    lambda_drug_per_h: f64,
    solver: StatsSummary,
    config: &'a RunConfig,
}

pub fn run(loaded: &Loaded, out: &Path) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let net_cfg = cfg
        .network
        .as_ref()
        .ok_or_else(|| CliError::Config("the network command needs a [network] section".into()))?;
    let graph = net_cfg.connectome.build(&loaded.base_dir, cfg.seed)?;
    let seed_node = graph
        .resolve(&net_cfg.seed_node)
        .map_err(|e| CliError::Config(format!("network.seed_node: {e}")))?;

    let base = cfg.model.kinetic_params();
    let (params, increment) = match &cfg.therapy.drug {
        Some(d) => apply_drug(&base, &d.spec())?,
        None => (base, 0.0),
    };
    let clearance = boost_clearance(&cfg.clearance_spec()?, increment)?;
    let n_max = cfg.model.n_max;
    let model = NetworkModel::new(
        &params,
        cfg.model.model_variant(),
        &graph,
        net_cfg.diffusion.schedule(),
        vec![clearance],
        n_max,
    )?;
    let y0 = model.seeded_state(seed_node, cfg.model.seed_p2)?;
    let events = invasion_events(&model, net_cfg.theta);
    let tr = integrate(&model, &y0, (0.0, cfg.solver.t_end()), &integration_config(&cfg.solver), &events)?;
    let order = invasion_order(&tr, &model, net_cfg.theta);
    let v = model.n_nodes();

    let mut w = csv::Writer::from_path(out.join("network.csv"))?;
    w.write_record(["t", "node", "M", "P"])?;
    for (t, y) in tr.times.iter().zip(&tr.states) {
        for j in 0..v {
            w.write_record([num(*t), j.to_string(), num(model.node_mass(y, j)), num(model.node_number(y, j))])?;
        }
    }
    w.flush()?;

    if cfg.output.long_format {
        let sizes: Vec<usize> = if cfg.output.sizes.is_empty() {
            (2..=n_max).collect()
        } else {
            cfg.output.sizes.clone()
        };
        let mut w = csv::Writer::from_path(out.join("network_sizes.csv"))?;
        w.write_record(["t", "node", "i", "p"])?;
        for (t, y) in tr.times.iter().zip(&tr.states) {
            for j in 0..v {
                let d = model.node_distribution(y, j);
                for &i in &sizes {
                    w.write_record([num(*t), j.to_string(), i.to_string(), num(d.at(i))])?;
                }
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(out.join("invasion.csv"))?;
    w.write_record(["rank", "node", "label", "time_h"])?;
    for inv in &order {
        let label = graph.labels().get(inv.node).cloned().unwrap_or_else(|| inv.node.to_string());
        w.write_record([
            inv.rank.map(|r| r.to_string()).unwrap_or_default(),
            inv.node.to_string(),
            label,
            inv.time.map(num).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let times: Vec<f64> = order.iter().filter_map(|inv| inv.time).collect();
    let y_end = tr.last_state();
    let summary = Summary {
        command: "network",
        n_nodes: v,
        n_edges: graph.edges().len(),
        algebraic_connectivity: laplacian(&graph).algebraic_connectivity(),
        seed_node,
        threshold_M: net_cfg.theta * params.m_0,
        invaded: times.len(),
        first_invasion_h: times.first().copied(),
        last_invasion_h: times.last().copied(),
        final_total_M: (0..v).map(|j| model.node_mass(y_end, j)).sum(),
        lambda_drug_per_h: increment,
        solver: tr.stats.into(),
        config: cfg,
    };
    write_json(&out.join("summary.json"), &summary)
}
