//! Track–detection affinity and bipartite matching.

use crate::geometry::giou3d;
use crate::model::{AssociationThresholds, Box3D, MatcherKind, TrackId};

/// Dense GIoU affinities; rows are tracks, columns detections.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub track_ids: Vec<TrackId>,
    pub det_indices: Vec<usize>,
    values: Vec<f64>,
}

impl AffinityMatrix {
    pub fn from_rows(track_ids: Vec<TrackId>, det_indices: Vec<usize>, rows: &[Vec<f64>]) -> Self {
        assert_eq!(rows.len(), track_ids.len());
        let mut values = Vec::with_capacity(track_ids.len() * det_indices.len());
        for r in rows {
            assert_eq!(r.len(), det_indices.len());
            values.extend_from_slice(r);
        }
        AffinityMatrix {
            track_ids,
            det_indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.track_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.det_indices.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub track: TrackId,
    pub det: usize,
    pub affinity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub unmatched_tracks: Vec<TrackId>,
    pub unmatched_dets: Vec<usize>,
}

impl MatchResult {
    pub fn total_affinity(&self) -> f64 {
        self.matches.iter().map(|m| m.affinity).sum()
    }

    /// Demotes pairs below `threshold` to unmatched.
    pub fn thresholded(self, threshold: f64) -> MatchResult {
        let mut out = MatchResult {
            matches: Vec::with_capacity(self.matches.len()),
            unmatched_tracks: self.unmatched_tracks,
            unmatched_dets: self.unmatched_dets,
        };
        for m in self.matches {
            if m.affinity >= threshold {
                out.matches.push(m);
            } else {
                out.unmatched_tracks.push(m.track);
                out.unmatched_dets.push(m.det);
            }
        }
        out.unmatched_tracks.sort();
        out.unmatched_dets.sort();
        out
    }

    fn from_assignment(m: &AffinityMatrix, row_to_col: &[Option<usize>]) -> MatchResult {
        let mut col_used = vec![false; m.cols()];
        let mut out = MatchResult::default();
        for (r, c) in row_to_col.iter().enumerate() {
            match c {
                Some(c) => {
                    col_used[*c] = true;
                    out.matches.push(Match {
                        track: m.track_ids[r],
                        det: m.det_indices[*c],
                        affinity: m.get(r, *c),
                    });
                }
                None => out.unmatched_tracks.push(m.track_ids[r]),
            }
        }
        out.unmatched_dets = (0..m.cols())
            .filter(|&c| !col_used[c])
            .map(|c| m.det_indices[c])
            .collect();
        out.unmatched_tracks.sort();
        out.unmatched_dets.sort();
        out
    }
}

/// Track geometry offered to the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackBox {
    pub id: TrackId,
    pub bbox: Box3D,
    /// Missed the previous frame. Lost tracks only take high-score
    /// detections.
    pub lost: bool,
}

/// Detection offered to the matcher; `index` is the caller's handle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetBox {
    pub index: usize,
    pub bbox: Box3D,
    pub score: f64,
}

pub fn build_affinity(tracks: &[TrackBox], dets: &[DetBox]) -> AffinityMatrix {
    let mut values = Vec::with_capacity(tracks.len() * dets.len());
    for t in tracks {
        for d in dets {
            values.push(giou3d(&t.bbox, &d.bbox));
        }
    }
    AffinityMatrix {
        track_ids: tracks.iter().map(|t| t.id).collect(),
        det_indices: dets.iter().map(|d| d.index).collect(),
        values,
    }
}

/// Maximum-weight assignment over a dense `rows × cols` weight table.
/// Every row is assigned when `rows ≤ cols`, every column otherwise.
pub fn max_weight_assignment(
    rows: usize,
    cols: usize,
    weight: &dyn Fn(usize, usize) -> f64,
) -> Vec<Option<usize>> {
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let col_to_row = max_weight_assignment(cols, rows, &|c, r| weight(r, c));
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // Shortest augmenting paths with potentials, minimizing −weight.
    let (n, m) = (rows, cols);
    let cost = |i: usize, j: usize| -weight(i - 1, j - 1);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
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
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Optimal assignment maximizing total affinity, before thresholding.
pub fn hungarian(m: &AffinityMatrix) -> MatchResult {
    let assignment = max_weight_assignment(m.rows(), m.cols(), &|r, c| m.get(r, c));
    MatchResult::from_assignment(m, &assignment)
}

/// Repeatedly takes the largest remaining entry; ties go to the lower track
/// id, then the lower detection index.
pub fn greedy(m: &AffinityMatrix) -> MatchResult {
    let mut entries: Vec<(usize, usize)> = (0..m.rows())
        .flat_map(|r| (0..m.cols()).map(move |c| (r, c)))
        .collect();
    entries.sort_by(|&(r1, c1), &(r2, c2)| {
        m.get(r2, c2)
            .total_cmp(&m.get(r1, c1))
            .then(m.track_ids[r1].cmp(&m.track_ids[r2]))
            .then(m.det_indices[c1].cmp(&m.det_indices[c2]))
    });
    let mut row_to_col = vec![None; m.rows()];
    let mut col_used = vec![false; m.cols()];
    for (r, c) in entries {
        if row_to_col[r].is_none() && !col_used[c] {
            row_to_col[r] = Some(c);
            col_used[c] = true;
        }
    }
    MatchResult::from_assignment(m, &row_to_col)
}

pub fn solve(m: &AffinityMatrix, matcher: MatcherKind) -> MatchResult {
    match matcher {
        MatcherKind::Hungarian => hungarian(m),
        MatcherKind::Greedy => greedy(m),
    }
}

/// Score-split cascade: high-score detections against all tracks at `tau1`,
/// then leftover tracks that are not lost against low-score detections at
/// `tau2`.
pub fn associate_two_stage(
    tracks: &[TrackBox],
    dets: &[DetBox],
    matcher: MatcherKind,
    thresholds: &AssociationThresholds,
) -> MatchResult {
    let (high, low): (Vec<DetBox>, Vec<DetBox>) =
        dets.iter().partition(|d| d.score >= thresholds.high_score);

    let first = solve(&build_affinity(tracks, &high), matcher).thresholded(thresholds.tau1);

    let leftover: Vec<TrackBox> = tracks
        .iter()
        .filter(|t| !t.lost && first.unmatched_tracks.contains(&t.id))
        .copied()
        .collect();
    let second = solve(&build_affinity(&leftover, &low), matcher).thresholded(thresholds.tau2);

    let mut unmatched_tracks: Vec<TrackId> = first
        .unmatched_tracks
        .into_iter()
        .filter(|id| !second.matches.iter().any(|m| m.track == *id))
        .collect();
    unmatched_tracks.sort();
    let mut out = MatchResult {
        matches: first.matches,
        unmatched_tracks,
        unmatched_dets: first.unmatched_dets,
    };
    out.matches.extend(second.matches);
    out.unmatched_dets.extend(second.unmatched_dets);
    out.unmatched_dets.sort();
    out
}
