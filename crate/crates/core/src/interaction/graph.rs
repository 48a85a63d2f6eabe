use crate::error::Result;
use crate::types::{Detection, Role};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the same-instance candidate in one reference frame. The weight
/// function is only evaluated when there is more than one candidate.
pub fn resolve_inter_frame(num_candidates: usize, weights: impl FnOnce() -> Result<Vec<f64>>) -> Result<Option<usize>> {
    match num_candidates {
        0 => Ok(None),
        1 => Ok(Some(0)),
        _ => Ok(argmax_first(&weights()?)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterEdge {
    /// Node index within the key frame.
    pub key_node: usize,
    pub frame: usize,
    /// Node index within `frame`.
    pub node: usize,
}

/// Nodes are detections per frame; the last frame is the key frame.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub nodes: Vec<Vec<(Role, usize)>>,
    /// Oldest frame first for each key node.
    pub inter: Vec<InterEdge>,
    /// (instrument node, tissue node) pairs of the key frame, instrument-major.
    pub intra: Vec<(usize, usize)>,
}

impl InteractionGraph {
    pub fn key(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn instruments(&self) -> Vec<usize> {
        self.role_nodes(Role::Instrument)
    }

    pub fn tissues(&self) -> Vec<usize> {
        self.role_nodes(Role::Tissue)
    }

    fn role_nodes(&self, role: Role) -> Vec<usize> {
        let key = self.key();
        (0..self.nodes[key].len()).filter(|&i| self.nodes[key][i].0 == role).collect()
    }

    /// Resolved chain for a key node, oldest first, as (frame, node).
    pub fn chain(&self, key_node: usize) -> Vec<(usize, usize)> {
        let mut c: Vec<(usize, usize)> = self
            .inter
            .iter()
            .filter(|e| e.key_node == key_node)
            .map(|e| (e.frame, e.node))
            .collect();
        c.sort_unstable();
        c.push((self.key(), key_node));
        c
    }
}

/// Builds the graph. `select(key_node, frame, candidates)` returns the
/// position within `candidates` of the chosen node when several share the
/// key node's category.
pub fn build_graph(
    detections: &[Vec<Detection>],
    with_inter: bool,
    mut select: impl FnMut(usize, usize, &[usize]) -> Result<usize>,
) -> Result<InteractionGraph> {
    let nodes: Vec<Vec<(Role, usize)>> = detections
        .iter()
        .map(|f| f.iter().map(|d| (d.role, d.category)).collect())
        .collect();
    let key = nodes.len() - 1;
    let mut inter = Vec::new();
    if with_inter {
        for (o, &(role, cat)) in nodes[key].iter().enumerate() {
            for (frame, frame_nodes) in nodes[..key].iter().enumerate() {
                let cands: Vec<usize> = (0..frame_nodes.len()).filter(|&n| frame_nodes[n] == (role, cat)).collect();
                let picked = resolve_inter_frame(cands.len(), || {
                    let i = select(o, frame, &cands)?;
                    let mut one_hot = vec![0.0; cands.len()];
                    one_hot[i] = 1.0;
                    Ok(one_hot)
                })?;
                if let Some(i) = picked {
                    inter.push(InterEdge {
                        key_node: o,
                        frame,
                        node: cands[i],
                    });
                }
            }
        }
    }
    let ins: Vec<usize> = (0..nodes[key].len()).filter(|&i| nodes[key][i].0 == Role::Instrument).collect();
    let tis: Vec<usize> = (0..nodes[key].len()).filter(|&i| nodes[key][i].0 == Role::Tissue).collect();
    let intra = ins.iter().flat_map(|&i| tis.iter().map(move |&t| (i, t))).collect();
    Ok(InteractionGraph { nodes, inter, intra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn d(role: Role, cat: usize) -> Detection {
        Detection::new(role, cat, BoundingBox::new(0.0, 0.0, 4.0, 4.0), 0.9)
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[0.2, 0.7, 0.7]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn resolution_cases() {
        assert_eq!(resolve_inter_frame(0, || unreachable!()).unwrap(), None);
        assert_eq!(resolve_inter_frame(1, || unreachable!()).unwrap(), Some(0));
        assert_eq!(resolve_inter_frame(3, || Ok(vec![0.1, 0.9, 0.3])).unwrap(), Some(1));
    }

    #[test]
    fn missing_category_gives_no_edge() {
        let dets = vec![vec![d(Role::Tissue, 0)], vec![d(Role::Instrument, 1), d(Role::Tissue, 0)]];
        let g = build_graph(&dets, true, |_, _, _| unreachable!()).unwrap();
        assert_eq!(g.inter, vec![InterEdge { key_node: 1, frame: 0, node: 0 }]);
        assert_eq!(g.chain(0), vec![(1, 0)]);
        assert_eq!(g.intra, vec![(0, 1)]);
    }

    fn arb_frames() -> impl Strategy<Value = Vec<Vec<(bool, usize)>>> {
        prop::collection::vec(prop::collection::vec((any::<bool>(), 0usize..3), 0..6), 1..5)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn structural_invariants(frames in arb_frames(), pick in any::<u64>()) {
            let dets: Vec<Vec<Detection>> = frames
                .iter()
                .map(|f| f.iter().map(|&(ins, c)| d(if ins { Role::Instrument } else { Role::Tissue }, c)).collect())
                .collect();
            let g = build_graph(&dets, true, |o, f, c| Ok((pick as usize + o + f) % c.len())).unwrap();
            let key = g.key();
            let mut seen = std::collections::BTreeSet::new();
            for e in &g.inter {
                prop_assert!(e.frame < key);
                prop_assert_eq!(g.nodes[e.frame][e.node], g.nodes[key][e.key_node]);
                prop_assert!(seen.insert((e.key_node, e.frame)));
            }
            for &(i, t) in &g.intra {
                prop_assert_eq!(g.nodes[key][i].0, Role::Instrument);
                prop_assert_eq!(g.nodes[key][t].0, Role::Tissue);
            }
            prop_assert_eq!(g.intra.len(), g.instruments().len() * g.tissues().len());
            for o in 0..g.nodes[key].len() {
                let cands_frames = (0..key).filter(|&f| g.nodes[f].contains(&g.nodes[key][o])).count();
                prop_assert_eq!(g.chain(o).len(), cands_frames + 1);
            }
        }
    }
}
