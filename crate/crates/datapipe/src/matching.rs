//! Temporal pairing of L1B and L2 granules.

use serde::Serialize;

use crate::granule::GranuleMeta;

/// Default pairing tolerance in seconds.
pub const DELTA_T: i64 = 10;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MatchReport {
    /// `(l1b index, l2 index)` in ascending L1B timestamp order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_l1b: Vec<usize>,
    pub unmatched_l2: Vec<usize>,
}

/// Greedy nearest-timestamp pairing.
///
/// L1B granules are visited in ascending timestamp order (ties by id); each takes
/// the closest still-unused L2 granule with `|Δt| ≤ delta_t`, preferring the
/// earlier L2 granule on equal distance. Every L2 granule is used at most once.
pub fn match_granules(l1b: &[GranuleMeta], l2: &[GranuleMeta], delta_t: i64) -> MatchReport {
    let mut order: Vec<usize> = (0..l1b.len()).collect();
    order.sort_by(|&a, &b| (l1b[a].timestamp, &l1b[a].id).cmp(&(l1b[b].timestamp, &l1b[b].id)));
    let mut used = vec![false; l2.len()];
    let mut report = MatchReport::default();
    for i in order {
        let t = l1b[i].timestamp;
        let best = l2
            .iter()
            .enumerate()
            .filter(|&(j, g)| !used[j] && (g.timestamp - t).abs() <= delta_t)
            .min_by_key(|&(_, g)| ((g.timestamp - t).abs(), g.timestamp, g.id.clone()));
        match best {
            Some((j, _)) => {
                used[j] = true;
                report.pairs.push((i, j));
            }
            None => report.unmatched_l1b.push(i),
        }
    }
    report.unmatched_l1b.sort_unstable();
    report.unmatched_l2 = (0..l2.len()).filter(|&j| !used[j]).collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granule::GranuleKind;

    fn g(id: &str, kind: GranuleKind, t: i64) -> GranuleMeta {
        GranuleMeta {
            id: id.into(),
            kind,
            timestamp: t,
            date: "2024-05-10".into(),
            height: 96,
            width: 96,
            bands: None,
        }
    }

    #[test]
    fn ten_seconds_matches_eleven_does_not() {
        let l1 = vec![g("a", GranuleKind::L1b, 1000), g("b", GranuleKind::L1b, 5000)];
        let l2 = vec![g("x", GranuleKind::L2, 1010), g("y", GranuleKind::L2, 5011)];
        let r = match_granules(&l1, &l2, DELTA_T);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.unmatched_l1b, vec![1]);
        assert_eq!(r.unmatched_l2, vec![1]);
        let early = vec![g("z", GranuleKind::L2, 990)];
        assert_eq!(match_granules(&l1[..1], &early, DELTA_T).pairs, vec![(0, 0)]);
    }

    #[test]
    fn nearest_candidate_wins() {
        let l1 = vec![g("a", GranuleKind::L1b, 100)];
        let l2 = vec![g("far", GranuleKind::L2, 107), g("near", GranuleKind::L2, 103)];
        assert_eq!(match_granules(&l1, &l2, DELTA_T).pairs, vec![(0, 1)]);
    }

    #[test]
    fn each_l2_is_used_once() {
        let l1 = vec![g("a", GranuleKind::L1b, 100), g("b", GranuleKind::L1b, 104)];
        let l2 = vec![g("x", GranuleKind::L2, 102)];
        let r = match_granules(&l1, &l2, DELTA_T);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.unmatched_l1b, vec![1]);
    }

    #[test]
    fn equal_distance_prefers_the_earlier_l2() {
        let l1 = vec![g("a", GranuleKind::L1b, 100)];
        let l2 = vec![g("late", GranuleKind::L2, 105), g("early", GranuleKind::L2, 95)];
        assert_eq!(match_granules(&l1, &l2, DELTA_T).pairs, vec![(0, 1)]);
    }
}
