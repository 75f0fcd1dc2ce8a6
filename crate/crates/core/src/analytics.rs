//! Gate activation and instance-embedding exports.

use std::io::Write;
use std::path::Path;

use vrpmoe_tensor::{Graph, ParamSet};

use crate::error::{Error, Result};
use crate::instance::{DistLabel, Instance};
use crate::policy::{DecodeMode, DecoderRouting, GateTrace, PolicyNet, RolloutOptions};

/// Decoder gate selections and `z_inst` for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceActivation {
    pub dist_label: DistLabel,
    /// Instance routing: the `k` experts chosen once. Node routing: all
    /// selections of a single greedy rollout, step after step.
    pub selected: Vec<usize>,
    pub z_inst: Vec<f64>,
}

/// Runs the encoder (and, under node routing, a greedy single-start rollout)
/// on every instance. Requires a decoder MoE.
pub fn activations(net: &PolicyNet, params: &ParamSet, insts: &[Instance], chunk: usize) -> Result<Vec<InstanceActivation>> {
    if !net.cfg.moe_placement.decoder() {
        return Err(Error::Config("the checkpoint has no decoder MoE to analyze".into()));
    }
    let k = net.cfg.moe.k;
    let d = net.cfg.d;
    let mut out = Vec::with_capacity(insts.len());
    for group in insts.chunk_by(|a, b| a.num_nodes() == b.num_nodes() && a.problem == b.problem) {
        for part in group.chunks(chunk.max(1)) {
            let mut g = Graph::with_params(params).no_grad();
            let (z, per_instance) = match net.cfg.decoder_routing {
                DecoderRouting::Instance => {
                    let enc = net.encode(&mut g, part, None, None, &mut GateTrace::default())?;
                    let route = enc.dec_route.as_ref().expect("decoder MoE under instance routing");
                    let sel: Vec<Vec<usize>> = route.selected.chunks(k).map(<[usize]>::to_vec).collect();
                    (g.value(enc.z_inst).to_vec(), sel)
                }
                DecoderRouting::Node => {
                    let opts = RolloutOptions { mode: DecodeMode::Greedy, starts: 1, replay: None };
                    let ro = net.rollout(&mut g, part, &opts, None)?;
                    let mut sel = vec![Vec::new(); part.len()];
                    for step in &ro.trace.decoder {
                        for (i, s) in step.chunks(k).enumerate() {
                            sel[i].extend_from_slice(s);
                        }
                    }
                    (g.value(ro.z_inst).to_vec(), sel)
                }
            };
            for ((inst, selected), zi) in part.iter().zip(per_instance).zip(z.chunks(d)) {
                out.push(InstanceActivation { dist_label: inst.dist_label, selected, z_inst: zi.to_vec() });
            }
        }
    }
    Ok(out)
}

/// CSV `dist_label,z_0,...,z_{d-1}`, one row per instance.
pub fn write_embedding_csv(path: &Path, rows: &[InstanceActivation]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.z_inst.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "dist_label")?;
    for j in 0..d {
        write!(out, ",z_{j}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{}", r.dist_label.name())?;
        for x in &r.z_inst {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Problem;
    use crate::instancegen::{generate_many, DistributionSpec};
    use crate::moe::usage_histogram;
    use crate::policy::{preset_config, Policy};

    #[test]
    fn histogram_counts_k_per_instance() {
        let cfg = preset_config("tiny", Problem::Tsp).unwrap();
        let pol = Policy::new(cfg, 4).unwrap();
        let insts = generate_many(&DistributionSpec::new(DistLabel::Cluster, 7), Problem::Tsp, 9, 2).unwrap();
        let acts = activations(&pol.net, &pol.params, &insts, 4).unwrap();
        assert_eq!(acts.len(), 9);
        let hist = usage_histogram(acts.iter().map(|a| a.selected.as_slice()), cfg.moe.m);
        assert_eq!(hist.iter().sum::<u64>(), 9 * cfg.moe.k as u64);
        assert!(acts.iter().all(|a| a.z_inst.len() == cfg.d));
    }

    #[test]
    fn node_routing_collects_every_step() {
        let mut cfg = preset_config("tiny", Problem::Tsp).unwrap();
        cfg.decoder_routing = DecoderRouting::Node;
        let pol = Policy::new(cfg, 4).unwrap();
        let insts = generate_many(&DistributionSpec::new(DistLabel::Uniform, 5), Problem::Tsp, 3, 2).unwrap();
        let acts = activations(&pol.net, &pol.params, &insts, 8).unwrap();
        assert!(acts.iter().all(|a| a.selected.len() == (5 - 1) * cfg.moe.k));
    }
}
