//! OLTP operation mixes.
//!
//! Probabilities are held in per-mille so every table sums to exactly 1000.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum OpKind {
    GetVertexProps,
    CountEdges,
    GetEdges,
    AddVertex,
    DeleteVertex,
    UpdateProp,
    AddEdge,
}

pub const OP_KINDS: [OpKind; 7] = [
    OpKind::GetVertexProps,
    OpKind::CountEdges,
    OpKind::GetEdges,
    OpKind::AddVertex,
    OpKind::DeleteVertex,
    OpKind::UpdateProp,
    OpKind::AddEdge,
];

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::GetVertexProps => "get_vertex_props",
            OpKind::CountEdges => "count_edges",
            OpKind::GetEdges => "get_edges",
            OpKind::AddVertex => "add_vertex",
            OpKind::DeleteVertex => "delete_vertex",
            OpKind::UpdateProp => "update_prop",
            OpKind::AddEdge => "add_edge",
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(
            self,
            OpKind::AddVertex | OpKind::DeleteVertex | OpKind::UpdateProp | OpKind::AddEdge
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixName {
    Rm,
    Ri,
    Wi,
    Lb,
}

impl MixName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MixName::Rm => "rm",
            MixName::Ri => "ri",
            MixName::Wi => "wi",
            MixName::Lb => "lb",
        }
    }
}

/// One OLTP workload mix: per-mille probability per op kind, aligned with
/// `OP_KINDS`.
#[derive(Clone, Copy, Debug)]
pub struct OltpMix {
    pub name: MixName,
    pub permille: [u32; 7],
}

impl OltpMix {
    /// "Read Mostly": 99.8% reads (28.8 / 11.7 / 59.3), 0.2% edge adds.
    pub const RM: OltpMix = OltpMix { name: MixName::Rm, permille: [288, 117, 593, 0, 0, 0, 2] };
    /// "Read Intensive": 75% reads (21.7 / 8.8 / 44.5), 25% edge adds.
    pub const RI: OltpMix = OltpMix { name: MixName::Ri, permille: [217, 88, 445, 0, 0, 0, 250] };
    /// "Write Intensive": 20% reads (9.1 / 0 / 10.9), 80% updates
    /// (20 / 6.7 / 13.3 / 40).
    pub const WI: OltpMix = OltpMix { name: MixName::Wi, permille: [91, 0, 109, 200, 67, 133, 400] };
    /// LinkBench: 69% reads (12.9 / 4.9 / 51.2), 31% updates
    /// (2.6 / 1.0 / 7.4 / 20.0).
    pub const LB: OltpMix = OltpMix { name: MixName::Lb, permille: [129, 49, 512, 26, 10, 74, 200] };

    pub fn by_name(name: MixName) -> OltpMix {
        match name {
            MixName::Rm => Self::RM,
            MixName::Ri => Self::RI,
            MixName::Wi => Self::WI,
            MixName::Lb => Self::LB,
        }
    }

    pub fn total(&self) -> u32 {
        self.permille.iter().sum()
    }

    /// Draw one op i.i.d. from the table.
    pub fn sample(&self, rng: &mut impl Rng) -> OpKind {
        let mut x = rng.gen_range(0..1000u32);
        for (kind, p) in OP_KINDS.iter().zip(self.permille) {
            if x < p {
                return *kind;
            }
            x -= p;
        }
        unreachable!("mix does not sum to 1000")
    }

    pub fn probability(&self, kind: OpKind) -> f64 {
        let i = OP_KINDS.iter().position(|k| *k == kind).unwrap();
        self.permille[i] as f64 / 1000.0
    }
}

/// Pearson chi-square statistic of observed op counts against the mix.
/// Zero-probability kinds must have zero observations (else infinity).
pub fn chi_square(mix: &OltpMix, counts: &[u64; 7]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut chi2 = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let p = mix.permille[i] as f64 / 1000.0;
        if p == 0.0 {
            if c > 0 {
                return f64::INFINITY;
            }
            continue;
        }
        let expect = p * n as f64;
        let d = c as f64 - expect;
        chi2 += d * d / expect;
    }
    chi2
}

/// 0.999 quantile of the chi-square distribution, indexed by degrees of
/// freedom 1..=6.
pub fn chi_square_q999(df: usize) -> f64 {
    [10.828, 13.816, 16.266, 18.467, 20.515, 22.458][df - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tables_sum_to_exactly_one() {
        for mix in [OltpMix::RM, OltpMix::RI, OltpMix::WI, OltpMix::LB] {
            assert_eq!(mix.total(), 1000, "{:?}", mix.name);
        }
    }

    #[test]
    fn read_update_split_matches_published_numbers() {
        let read = |m: OltpMix| m.permille[0] + m.permille[1] + m.permille[2];
        assert_eq!(read(OltpMix::RM), 998);
        assert_eq!(read(OltpMix::RI), 750);
        assert_eq!(read(OltpMix::WI), 200);
        assert_eq!(read(OltpMix::LB), 690);
    }

    #[test]
    fn op_sequences_are_reproducible() {
        let draw = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31337);
            (0..1000).map(|_| OltpMix::WI.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn sampling_tracks_the_table() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mix = OltpMix::LB;
        let mut counts = [0u64; 7];
        let n = 100_000;
        for _ in 0..n {
            let k = mix.sample(&mut rng);
            counts[OP_KINDS.iter().position(|x| *x == k).unwrap()] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = mix.permille[i] as f64 / 1000.0;
            let diff = (c as f64 / n as f64 - p).abs();
            assert!(diff < 0.005, "kind {i} off by {diff}");
        }
        let df = mix.permille.iter().filter(|p| **p > 0).count() - 1;
        assert!(chi_square(&mix, &counts) < chi_square_q999(df));
    }
}
