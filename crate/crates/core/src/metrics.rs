//! Location-dependent detection metrics: F-score at an angular threshold,
//! DOA error and relative distance error over frame-level matched events.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::maccdoa::{angular_distance, wrap_azimuth, Event, EventList};
use crate::N_CLASSES;

pub const DEFAULT_ANGLE_THRESHOLD_DEG: f64 = 20.0;

/// `min(|a - b|, 360 - |a - b|)` in degrees.
pub fn angular_error(az_a: f64, az_b: f64) -> f64 {
    angular_distance(az_a, az_b)
}

/// Mirror rear azimuths into the front half-plane `[-90, 90]`.
pub fn fold_frontback(az: f64) -> f64 {
    let a = wrap_azimuth(az);
    if a > 90.0 {
        180.0 - a
    } else if a < -90.0 {
        -180.0 - a
    } else {
        a
    }
}

/// Minimum-cost assignment on a `rows x cols` cost matrix (row-major).
/// Returns `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut t = vec![0.0; cost.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let mut pairs: Vec<(usize, usize)> = hungarian(&t, cols, rows).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // potentials formulation, 1-based with a virtual column 0
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Exhaustive minimum-cost assignment over all injective maps; the oracle
/// for [`hungarian`] on small cells. Returns `(total_cost, pairs)`.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> (f64, Vec<(usize, usize)>) {
    fn rec(
        cost: &[f64],
        rows: usize,
        cols: usize,
        r: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        let needed = rows.min(cols);
        if cur.len() == needed {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        if r == rows {
            return;
        }
        // rows may stay unmatched only when there are more rows than columns
        if rows - r > needed - cur.len() {
            rec(cost, rows, cols, r + 1, used, cur, acc, best);
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push((r, c));
                rec(cost, rows, cols, r + 1, used, cur, acc + cost[r * cols + c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    if rows == 0 || cols == 0 {
        return (0.0, best.1);
    }
    rec(cost, rows, cols, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub pred_index: usize,
    pub ref_index: usize,
    pub frame: u32,
    pub class_id: usize,
    pub angular_error_deg: f64,
    pub distance_abs_error_m: f64,
    pub distance_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_ref: Vec<usize>,
}

fn group_cells(events: &[Event]) -> BTreeMap<(u32, usize), Vec<usize>> {
    let mut cells: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        cells.entry((e.frame, e.class_id)).or_default().push(i);
    }
    cells
}

/// Optimal per-(frame, class) assignment minimizing total angular error.
/// Indices refer to positions in `pred.events()` / `reference.events()`.
pub fn match_events(pred: &EventList, reference: &EventList) -> Matching {
    match_events_with(pred, reference, false)
}

fn azimuth_for(e: &Event, fold: bool) -> f64 {
    if fold {
        fold_frontback(e.azimuth_deg)
    } else {
        e.azimuth_deg
    }
}

fn match_events_with(pred: &EventList, reference: &EventList, fold: bool) -> Matching {
    let (pe, re) = (pred.events(), reference.events());
    let pred_cells = group_cells(pe);
    let ref_cells = group_cells(re);
    let mut out = Matching::default();
    let empty = Vec::new();
    let keys: std::collections::BTreeSet<_> = pred_cells.keys().chain(ref_cells.keys()).copied().collect();
    for key in keys {
        let ps = pred_cells.get(&key).unwrap_or(&empty);
        let rs = ref_cells.get(&key).unwrap_or(&empty);
        let mut cost = Vec::with_capacity(ps.len() * rs.len());
        for &pi in ps {
            for &ri in rs {
                cost.push(angular_error(azimuth_for(&pe[pi], fold), azimuth_for(&re[ri], fold)));
            }
        }
        let pairs = hungarian(&cost, ps.len(), rs.len());
        let mut pred_used = vec![false; ps.len()];
        let mut ref_used = vec![false; rs.len()];
        for (a, b) in pairs {
            pred_used[a] = true;
            ref_used[b] = true;
            let (p, r) = (&pe[ps[a]], &re[rs[b]]);
            let abs = (p.distance_m - r.distance_m).abs();
            out.pairs.push(MatchedPair {
                pred_index: ps[a],
                ref_index: rs[b],
                frame: key.0,
                class_id: key.1,
                angular_error_deg: cost[a * rs.len() + b],
                distance_abs_error_m: abs,
                distance_rel_error: abs / r.distance_m,
            });
        }
        out.unmatched_pred.extend(ps.iter().zip(&pred_used).filter(|(_, &u)| !u).map(|(&i, _)| i));
        out.unmatched_ref.extend(rs.iter().zip(&ref_used).filter(|(_, &u)| !u).map(|(&i, _)| i));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub angle_threshold_deg: f64,
    pub fold_frontback: bool,
    pub n_classes: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            angle_threshold_deg: DEFAULT_ANGLE_THRESHOLD_DEG,
            fold_frontback: false,
            n_classes: N_CLASSES,
        }
    }
}

/// Additive counters; clips are scored independently and merged by summing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub matched: u64,
    pub angular_sum_deg: f64,
    pub rel_distance_sum: f64,
}

impl Counts {
    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.matched += other.matched;
        self.angular_sum_deg += other.angular_sum_deg;
        self.rel_distance_sum += other.rel_distance_sum;
    }

    pub fn f_score(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// NaN when nothing was matched.
    pub fn doae_deg(&self) -> f64 {
        if self.matched == 0 {
            f64::NAN
        } else {
            self.angular_sum_deg / self.matched as f64
        }
    }

    /// NaN when nothing was matched.
    pub fn rde(&self) -> f64 {
        if self.matched == 0 {
            f64::NAN
        } else {
            self.rel_distance_sum / self.matched as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub f20: f64,
    pub doae_deg: f64,
    pub rde: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub matched: u64,
    pub angle_threshold_deg: f64,
    pub per_class: Vec<Counts>,
}

impl MetricsReport {
    pub fn from_counts(total: &Counts, per_class: Vec<Counts>, threshold: f64) -> Self {
        MetricsReport {
            f20: total.f_score(),
            doae_deg: total.doae_deg(),
            rde: total.rde(),
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            matched: total.matched,
            angle_threshold_deg: threshold,
            per_class,
        }
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "angle_threshold_deg={}", self.angle_threshold_deg);
        let _ = writeln!(s, "f20={:.6}", self.f20);
        let _ = writeln!(s, "doae_deg={:.6}", self.doae_deg);
        let _ = writeln!(s, "rde={:.6}", self.rde);
        let _ = writeln!(s, "tp={}", self.tp);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "fn={}", self.fn_);
        let _ = writeln!(s, "matched={}", self.matched);
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,f20,doae_deg,rde,tp,fp,fn,matched\n");
        for (c, k) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{c},{:.6},{:.6},{:.6},{},{},{},{}",
                k.f_score(),
                k.doae_deg(),
                k.rde(),
                k.tp,
                k.fp,
                k.fn_,
                k.matched
            );
        }
        s
    }
}

/// Per-class counters for one pair of event lists.
pub fn score_counts(pred: &EventList, reference: &EventList, cfg: &ScoreConfig) -> Vec<Counts> {
    let n_classes = pred
        .iter()
        .chain(reference.iter())
        .map(|e| e.class_id + 1)
        .max()
        .unwrap_or(0)
        .max(cfg.n_classes);
    let mut per_class = vec![Counts::default(); n_classes];
    let m = match_events_with(pred, reference, cfg.fold_frontback);
    for pair in &m.pairs {
        let k = &mut per_class[pair.class_id];
        k.matched += 1;
        k.angular_sum_deg += pair.angular_error_deg;
        k.rel_distance_sum += pair.distance_rel_error;
        if pair.angular_error_deg <= cfg.angle_threshold_deg {
            k.tp += 1;
        } else {
            k.fp += 1;
            k.fn_ += 1;
        }
    }
    for &i in &m.unmatched_pred {
        per_class[pred.events()[i].class_id].fp += 1;
    }
    for &i in &m.unmatched_ref {
        per_class[reference.events()[i].class_id].fn_ += 1;
    }
    per_class
}

pub fn score(pred: &EventList, reference: &EventList, cfg: &ScoreConfig) -> MetricsReport {
    let per_class = score_counts(pred, reference, cfg);
    let mut total = Counts::default();
    per_class.iter().for_each(|k| total.merge(k));
    MetricsReport::from_counts(&total, per_class, cfg.angle_threshold_deg)
}

/// Label side of channel-swap augmentation: azimuth is mirrored.
pub fn acs_transform_labels(events: &EventList) -> EventList {
    events
        .iter()
        .map(|e| Event {
            azimuth_deg: wrap_azimuth(-e.azimuth_deg),
            ..e.clone()
        })
        .collect()
}
