#![allow(dead_code)]

use pdode::net::{LinkSpec, Network, PathTable, TimeGrid};
use rand::Rng;

pub struct PacketResult {
    pub link_times: Vec<f64>,
    pub path_times: Vec<f64>,
    /// Dense `rho[row][col]` in the same layout as the DNL's sparse matrix.
    pub rho: Vec<Vec<f64>>,
}

/// Discrete-event simulation with packets of `size` vehicles. Each link delays a packet by
/// its free-flow time, then serves packets first-come first-served at capacity. Links
/// must be indexed in an order compatible with every path.
pub fn packet_oracle(net: &Network, paths: &PathTable, grid: &TimeGrid, flows: &[f64], size: f64) -> PacketResult {
    let n = grid.num_intervals();
    let np = paths.len();
    let na = net.num_links();
    let len = grid.interval_length();

    struct Packet {
        path: usize,
        cohort: usize,
        hop: usize,
        time: f64,
        entries: Vec<f64>,
    }
    let mut packets = Vec::new();
    for h in 0..n {
        for k in 0..np {
            let count = (flows[h * np + k] / size).round() as usize;
            for i in 0..count {
                packets.push(Packet {
                    path: k,
                    cohort: h,
                    hop: 0,
                    time: h as f64 * len + (i as f64 + 0.5) * len / count as f64,
                    entries: Vec::new(),
                });
            }
        }
    }

    // Per link: (entry time, exit time) of every packet, in entry order.
    let mut served: Vec<Vec<(f64, f64)>> = vec![Vec::new(); na];
    for a in 0..na {
        let link = &net.links()[a];
        let mut queue: Vec<usize> = (0..packets.len())
            .filter(|&i| paths.paths()[packets[i].path].links.get(packets[i].hop) == Some(&a))
            .collect();
        queue.sort_by(|&i, &j| packets[i].time.total_cmp(&packets[j].time));
        let mut last = f64::NEG_INFINITY;
        for i in queue {
            let p = &mut packets[i];
            let entry = p.time;
            let exit = if link.is_connector {
                entry
            } else {
                (entry + link.free_flow_time()).max(last + size / link.capacity_per_second())
            };
            last = exit;
            served[a].push((entry, exit));
            p.entries.push(entry);
            p.time = exit;
            p.hop += 1;
        }
    }

    let exit_time = |a: usize, t: f64| -> f64 {
        let link = &net.links()[a];
        if link.is_connector {
            return t;
        }
        let ahead = served[a].iter().take_while(|(e, _)| *e <= t).last();
        let free = t + link.free_flow_time();
        match ahead {
            Some(&(_, x)) => free.max(x + size / link.capacity_per_second()),
            None => free,
        }
    };
    let mut link_times = vec![0.0; n * na];
    for h in 0..n {
        let t = (h as f64 + 0.5) * len;
        for a in 0..na {
            link_times[h * na + a] = exit_time(a, t) - t;
        }
    }
    let mut path_times = vec![0.0; n * np];
    for h in 0..n {
        let t0 = (h as f64 + 0.5) * len;
        for (k, p) in paths.paths().iter().enumerate() {
            path_times[h * np + k] = p.links.iter().fold(t0, |t, &a| exit_time(a, t)) - t0;
        }
    }
    let mut rho = vec![vec![0.0; n * np]; n * na];
    let mut counts = vec![0usize; n * np];
    for p in &packets {
        counts[p.cohort * np + p.path] += 1;
    }
    for p in &packets {
        let col = p.cohort * np + p.path;
        for (hop, &t) in p.entries.iter().enumerate() {
            let hp = (t / len).floor() as usize;
            if hp < n {
                let a = paths.paths()[p.path].links[hop];
                rho[hp * na + a][col] += 1.0 / counts[col] as f64;
            }
        }
    }
    PacketResult {
        link_times,
        path_times,
        rho,
    }
}

/// Random acyclic network with one or two OD pairs, link ids ascending along every path.
pub fn random_network(rng: &mut impl Rng) -> Network {
    let nodes = rng.random_range(3..=6i64);
    let mut links = Vec::new();
    let mut id = 1;
    for from in 1..nodes {
        // A chain guarantees connectivity; extra forward links create route choice.
        for to in from + 1..=nodes {
            if to == from + 1 || rng.random::<f64>() < 0.35 {
                links.push(LinkSpec {
                    id,
                    from,
                    to,
                    length: rng.random_range(0.2..1.0),
                    free_flow_speed: rng.random_range(20.0..60.0),
                    capacity: rng.random_range(600.0..3000.0),
                    is_connector: false,
                    jam_density: None,
                });
                id += 1;
            }
        }
    }
    let mut ods = vec![(1, nodes)];
    if nodes > 3 && rng.random::<bool>() {
        ods.push((2, nodes));
    }
    Network::new((1..=nodes).collect(), links, ods).unwrap()
}

fn road(id: i64, from: i64, to: i64, length: f64, cap: f64) -> LinkSpec {
    LinkSpec {
        id,
        from,
        to,
        length,
        free_flow_speed: 30.0,
        capacity: cap,
        is_connector: false,
        jam_density: None,
    }
}

/// Two OD pairs (1→4, 5→4) with two routes each over six links; links 2 and 4 are shared
/// and narrow enough to queue.
pub fn toy_network() -> Network {
    Network::new(
        vec![1, 2, 3, 4, 5],
        vec![
            road(1, 1, 2, 0.4, 3000.0),
            road(2, 2, 4, 0.5, 1200.0),
            road(3, 1, 3, 0.6, 3000.0),
            road(4, 3, 4, 0.3, 1000.0),
            road(5, 5, 2, 0.5, 3000.0),
            road(6, 5, 3, 0.4, 3000.0),
        ],
        vec![(1, 4), (5, 4)],
    )
    .unwrap()
}

/// One OD pair served by a single link.
pub fn single_link_network(capacity: f64) -> Network {
    Network::new(vec![1, 2], vec![road(1, 1, 2, 0.5, capacity)], vec![(1, 2)]).unwrap()
}
