use crate::fabric::{FabricError, Latency, NodeId, Topology};

/// Chosen fork point together with the path it sits on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkPoint {
    pub switch: NodeId,
    /// origin → proxy shortest path, endpoints included.
    pub primary_path: Vec<NodeId>,
    /// fork switch → cache shortest path, endpoints included.
    pub cache_path: Vec<NodeId>,
    pub cache_latency: Latency,
}

/// The switch on the origin→proxy shortest path closest to the cache.
/// Ties go to the switch nearest the origin.
pub fn compute_fork_point(
    topology: &Topology,
    origin: &NodeId,
    proxy: &NodeId,
    cache: &NodeId,
) -> Result<ForkPoint, FabricError> {
    if !topology.contains(cache) {
        return Err(FabricError::UnknownNode(cache.clone()));
    }
    let primary_path = topology.shortest_path(origin, proxy)?;
    let mut best: Option<(Latency, &NodeId, Vec<NodeId>)> = None;
    for switch in primary_path.iter().filter(|n| topology.is_switch(n)) {
        let path = topology.shortest_path(switch, cache)?;
        let latency = topology.path_latency(&path).expect("path follows links");
        if best.as_ref().is_none_or(|(l, _, _)| latency < *l) {
            best = Some((latency, switch, path));
        }
    }
    let (cache_latency, switch, cache_path) = best.ok_or_else(|| {
        FabricError::InvalidTopology(format!("no switch between '{origin}' and '{proxy}'"))
    })?;
    Ok(ForkPoint {
        switch: switch.clone(),
        primary_path: primary_path.clone(),
        cache_path,
        cache_latency,
    })
}
