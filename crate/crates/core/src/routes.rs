//! Flattening of P×P×K token cubes into directed 1-D pixel sequences and
//! the scan-and-merge step built on top of them.
//!
//! A cube is stored canonically as `[p_row][p_col][k]`, row-major. The
//! spectral-priority order walks spatial positions row-major with the band
//! index fastest (which is exactly the canonical layout); the
//! spatial-priority order walks bands with the spatial position fastest.
//! Each order also has a reversed direction, and a route picks 2 or 4 of
//! these directed sequences.
//!
//! Every directed sequence carries an index map — a bijection from
//! sequence position to (spatial index, band index) — so outputs can be
//! placed back at their source voxels regardless of direction. Merging is
//! a pairwise sum in branch-index order, which keeps the identity-stub
//! invariant (2x or 4x the input) exact in floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{self, S6Params};
use crate::Real;

/// The five flattening routes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteId {
    #[serde(rename = "spectral-priority")]
    SpectralPriority,
    #[serde(rename = "spatial-priority")]
    SpatialPriority,
    #[serde(rename = "cross-spectral-spatial")]
    CrossSpectralSpatial,
    #[serde(rename = "cross-spatial-spectral")]
    CrossSpatialSpectral,
    #[serde(rename = "parallel-spectral-spatial")]
    ParallelSpectralSpatial,
}

impl RouteId {
    pub fn all() -> [RouteId; 5] {
        [
            RouteId::SpectralPriority,
            RouteId::SpatialPriority,
            RouteId::CrossSpectralSpatial,
            RouteId::CrossSpatialSpectral,
            RouteId::ParallelSpectralSpatial,
        ]
    }

    /// Directed sequences this route produces, in merge order.
    pub fn branch_specs(self) -> &'static [(FlattenOrder, Direction)] {
        use Direction::*;
        use FlattenOrder::*;
        match self {
            RouteId::SpectralPriority => &[(Spectral, Forward), (Spectral, Reversed)],
            RouteId::SpatialPriority => &[(Spatial, Forward), (Spatial, Reversed)],
            RouteId::CrossSpectralSpatial => &[(Spectral, Forward), (Spatial, Reversed)],
            RouteId::CrossSpatialSpectral => &[(Spatial, Forward), (Spectral, Reversed)],
            RouteId::ParallelSpectralSpatial => &[
                (Spatial, Forward),
                (Spatial, Reversed),
                (Spectral, Forward),
                (Spectral, Reversed),
            ],
        }
    }

    pub fn branch_count(self) -> usize {
        self.branch_specs().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            RouteId::SpectralPriority => "spectral-priority",
            RouteId::SpatialPriority => "spatial-priority",
            RouteId::CrossSpectralSpatial => "cross-spectral-spatial",
            RouteId::CrossSpatialSpectral => "cross-spatial-spectral",
            RouteId::ParallelSpectralSpatial => "parallel-spectral-spatial",
        }
    }

    pub fn parse(s: &str) -> Result<RouteId> {
        RouteId::all()
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown route '{s}' (expected one of: {})",
                    RouteId::all().map(|r| r.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for RouteId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlattenOrder {
    Spectral,
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reversed,
}

impl Direction {
    pub fn toggled(self) -> Direction {
        match self {
            Direction::Forward => Direction::Reversed,
            Direction::Reversed => Direction::Forward,
        }
    }
}

/// Bijection from sequence position to (spatial index, band index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqIndexMap {
    p: usize,
    k: usize,
    entries: Vec<(usize, usize)>,
}

impl SeqIndexMap {
    /// Spatial positions outer (row-major over the P×P grid), band fastest.
    pub fn spectral(p: usize, k: usize) -> SeqIndexMap {
        let mut entries = Vec::with_capacity(p * p * k);
        for sp in 0..p * p {
            for band in 0..k {
                entries.push((sp, band));
            }
        }
        SeqIndexMap { p, k, entries }
    }

    /// Bands outer, spatial position fastest (row-major within each band).
    pub fn spatial(p: usize, k: usize) -> SeqIndexMap {
        let mut entries = Vec::with_capacity(p * p * k);
        for band in 0..k {
            for sp in 0..p * p {
                entries.push((sp, band));
            }
        }
        SeqIndexMap { p, k, entries }
    }

    pub fn for_order(order: FlattenOrder, p: usize, k: usize) -> SeqIndexMap {
        match order {
            FlattenOrder::Spectral => SeqIndexMap::spectral(p, k),
            FlattenOrder::Spatial => SeqIndexMap::spatial(p, k),
        }
    }

    pub fn reversed(&self) -> SeqIndexMap {
        let mut entries = self.entries.clone();
        entries.reverse();
        SeqIndexMap {
            p: self.p,
            k: self.k,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// Offsets into the canonical `[p_row][p_col][k]` cube layout.
    pub fn flat_offsets(&self) -> Vec<usize> {
        self.entries.iter().map(|&(sp, band)| sp * self.k + band).collect()
    }

    /// True when every (spatial, band) pair appears exactly once.
    pub fn is_bijection(&self) -> bool {
        let n = self.p * self.p * self.k;
        if self.entries.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &(sp, band) in &self.entries {
            if sp >= self.p * self.p || band >= self.k {
                return false;
            }
            let off = sp * self.k + band;
            if seen[off] {
                return false;
            }
            seen[off] = true;
        }
        true
    }
}

/// One flattened cube: values in sequence order plus the index map that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatSequence {
    pub values: Vec<Real>,
    pub order: FlattenOrder,
    pub direction: Direction,
    pub index_map: SeqIndexMap,
}

fn check_cube(op: &str, cube: &[Real], p: usize, k: usize) -> Result<()> {
    if p == 0 || k == 0 || cube.is_empty() {
        return Err(Error::invalid(format!("{op}: empty cube")));
    }
    if cube.len() != p * p * k {
        return Err(Error::shape(
            op,
            format!("{p}x{p}x{k} cube ({} values)", p * p * k),
            format!("{} values", cube.len()),
        ));
    }
    Ok(())
}

/// Unfold along the spectral dimension first: position-major, band fastest.
/// `values[(sp)*K + band] = cube[sp, band]`.
pub fn flatten_spectral_priority(cube: &[Real], p: usize, k: usize) -> Result<FlatSequence> {
    check_cube("flatten_spectral_priority", cube, p, k)?;
    let index_map = SeqIndexMap::spectral(p, k);
    // Canonical storage is already spectral-priority order.
    Ok(FlatSequence {
        values: cube.to_vec(),
        order: FlattenOrder::Spectral,
        direction: Direction::Forward,
        index_map,
    })
}

/// Organize by spatial location within each band: band-major, position
/// fastest. `values[band*P^2 + sp] = cube[sp, band]`.
pub fn flatten_spatial_priority(cube: &[Real], p: usize, k: usize) -> Result<FlatSequence> {
    check_cube("flatten_spatial_priority", cube, p, k)?;
    let index_map = SeqIndexMap::spatial(p, k);
    let values = index_map
        .flat_offsets()
        .iter()
        .map(|&off| cube[off])
        .collect();
    Ok(FlatSequence {
        values,
        order: FlattenOrder::Spatial,
        direction: Direction::Forward,
        index_map,
    })
}

/// Element-reverse a sequence, toggling its direction; values and index
/// map are flipped together.
pub fn revert(seq: &FlatSequence) -> FlatSequence {
    let mut values = seq.values.clone();
    values.reverse();
    FlatSequence {
        values,
        order: seq.order,
        direction: seq.direction.toggled(),
        index_map: seq.index_map.reversed(),
    }
}

/// Place sequence values back at their canonical cube offsets.
pub fn unflatten(values: &[Real], index_map: &SeqIndexMap) -> Result<Vec<Real>> {
    if values.len() != index_map.len() {
        return Err(Error::shape(
            "unflatten",
            format!("{} values", index_map.len()),
            format!("{} values", values.len()),
        ));
    }
    let mut cube = vec![0.0; index_map.len()];
    for (v, off) in values.iter().zip(index_map.flat_offsets()) {
        cube[off] = *v;
    }
    Ok(cube)
}

/// M token cubes sharing one P×P×K geometry, canonical layout
/// `[m][p_row][p_col][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    m: usize,
    p: usize,
    k: usize,
    data: Vec<Real>,
}

impl TokenBatch {
    pub fn new(m: usize, p: usize, k: usize, data: Vec<Real>) -> Result<TokenBatch> {
        if m == 0 || p == 0 || k == 0 {
            return Err(Error::invalid("TokenBatch requires positive extents"));
        }
        if data.len() != m * p * p * k {
            return Err(Error::shape(
                "TokenBatch",
                format!("{m}x{p}x{p}x{k} ({} values)", m * p * p * k),
                format!("{} values", data.len()),
            ));
        }
        Ok(TokenBatch { m, p, k, data })
    }

    pub fn zeros(m: usize, p: usize, k: usize) -> TokenBatch {
        TokenBatch {
            m,
            p,
            k,
            data: vec![0.0; m * p * p * k],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Flatten length shared by every route.
    pub fn seq_len(&self) -> usize {
        self.p * self.p * self.k
    }

    pub fn cube_len(&self) -> usize {
        self.p * self.p * self.k
    }

    pub fn cube(&self, i: usize) -> &[Real] {
        &self.data[i * self.cube_len()..(i + 1) * self.cube_len()]
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn at(&self, m: usize, row: usize, col: usize, band: usize) -> Real {
        self.data[((m * self.p + row) * self.p + col) * self.k + band]
    }
}

/// One directed sequence over a whole batch: each step carries the
/// M-vector of cube values at one (spatial, band) voxel.
#[derive(Clone, Debug)]
pub struct DirectedSeq {
    pub order: FlattenOrder,
    pub direction: Direction,
    pub index_map: SeqIndexMap,
    /// L×M row-major.
    pub steps: Vec<Real>,
}

/// Flatten all M cubes with the shared index map of each directed branch.
pub fn build_route_sequences(batch: &TokenBatch, route: RouteId) -> Result<Vec<DirectedSeq>> {
    let (m, l) = (batch.m(), batch.seq_len());
    route
        .branch_specs()
        .iter()
        .map(|&(order, direction)| {
            let mut map = SeqIndexMap::for_order(order, batch.p(), batch.k());
            if direction == Direction::Reversed {
                map = map.reversed();
            }
            let offsets = map.flat_offsets();
            let mut steps = vec![0.0; l * m];
            for j in 0..m {
                let cube = batch.cube(j);
                for (t, &off) in offsets.iter().enumerate() {
                    steps[t * m + j] = cube[off];
                }
            }
            Ok(DirectedSeq {
                order,
                direction,
                index_map: map,
                steps,
            })
        })
        .collect()
}

/// Scan every directed sequence with `scan` (which must return an L×M
/// output), place each output back at its source voxels, and merge the
/// branch cubes by pairwise summation in branch order.
pub fn scan_and_merge_with<F>(batch: &TokenBatch, route: RouteId, mut scan: F) -> Result<TokenBatch>
where
    F: FnMut(usize, &DirectedSeq) -> Result<Vec<Real>>,
{
    let (m, l) = (batch.m(), batch.seq_len());
    let seqs = build_route_sequences(batch, route)?;
    let mut branch_cubes: Vec<Vec<Real>> = Vec::with_capacity(seqs.len());
    for (bi, seq) in seqs.iter().enumerate() {
        let out = scan(bi, seq)?;
        if out.len() != l * m {
            return Err(Error::shape(
                "scan_and_merge",
                format!("{l}x{m} scan output"),
                format!("{} values", out.len()),
            ));
        }
        // Un-flatten through the branch's own index map; a reversed branch
        // lands back in canonical order automatically.
        let offsets = seq.index_map.flat_offsets();
        let mut cubes = vec![0.0; m * l];
        for (t, &off) in offsets.iter().enumerate() {
            for j in 0..m {
                cubes[j * l + off] = out[t * m + j];
            }
        }
        branch_cubes.push(cubes);
    }
    let merged = pairwise_sum(&branch_cubes);
    TokenBatch::new(m, batch.p(), batch.k(), merged)
}

/// Scan each branch with its own selective-scan parameter set.
pub fn scan_and_merge(
    batch: &TokenBatch,
    route: RouteId,
    params: &[S6Params<Real>],
) -> Result<TokenBatch> {
    if params.len() != route.branch_count() {
        return Err(Error::invalid(format!(
            "scan_and_merge: route {route} needs {} parameter sets, got {}",
            route.branch_count(),
            params.len()
        )));
    }
    for p in params {
        if p.feature_size != batch.m() {
            return Err(Error::shape(
                "scan_and_merge",
                format!("S6 feature size {}", batch.m()),
                format!("{}", p.feature_size),
            ));
        }
    }
    let l = batch.seq_len();
    scan_and_merge_with(batch, route, |bi, seq| {
        ssm::s6_selective_scan(&seq.steps, l, &params[bi])
    })
}

/// Pairwise sum in index order: (b0+b1) for two branches,
/// ((b0+b1)+(b2+b3)) for four. Keeps equal-branch sums exact.
fn pairwise_sum(cubes: &[Vec<Real>]) -> Vec<Real> {
    debug_assert!(!cubes.is_empty());
    let mut level: Vec<Vec<Real>> = cubes.to_vec();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for pair in level.chunks(2) {
            if pair.len() == 2 {
                next.push(pair[0].iter().zip(&pair[1]).map(|(a, b)| a + b).collect());
            } else {
                next.push(pair[0].clone());
            }
        }
        level = next;
    }
    level.pop().unwrap()
}

/// Debug dump of a directed index map: one row per sequence position with
/// 0-based grid coordinates.
pub fn index_map_csv(order: FlattenOrder, direction: Direction, p: usize, k: usize) -> String {
    let mut map = SeqIndexMap::for_order(order, p, k);
    if direction == Direction::Reversed {
        map = map.reversed();
    }
    let mut out = String::from("seq_pos,p_row,p_col,k\n");
    for (t, &(sp, band)) in map.entries().iter().enumerate() {
        let (row, col) = (sp / p, sp % p);
        out.push_str(&format!("{t},{row},{col},{band}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// The worked 2x2x2 cube: value(p, k) = 2*(p-1) + k with 1-based p, k.
    fn worked_cube() -> Vec<Real> {
        // Canonical layout [row][col][k]: p = row*2+col.
        (0..4).flat_map(|sp| [(2 * sp + 1) as Real, (2 * sp + 2) as Real]).collect()
    }

    #[test]
    fn spectral_priority_worked_example() {
        let seq = flatten_spectral_priority(&worked_cube(), 2, 2).unwrap();
        assert_eq!(seq.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn spatial_priority_worked_example() {
        let seq = flatten_spatial_priority(&worked_cube(), 2, 2).unwrap();
        assert_eq!(seq.values, vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn single_band_degenerates_to_spatial_order() {
        let cube: Vec<Real> = (0..9).map(|v| v as Real).collect();
        let spe = flatten_spectral_priority(&cube, 3, 1).unwrap();
        let spa = flatten_spatial_priority(&cube, 3, 1).unwrap();
        assert_eq!(spe.values, spa.values);
    }

    #[test]
    fn single_pixel_degenerates_to_spectral_order() {
        let cube: Vec<Real> = (0..5).map(|v| v as Real).collect();
        let spe = flatten_spectral_priority(&cube, 1, 5).unwrap();
        let spa = flatten_spatial_priority(&cube, 1, 5).unwrap();
        assert_eq!(spe.values, spa.values);
    }

    #[test]
    fn flatten_preserves_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, k) = (3, 4);
        let cube: Vec<Real> = (0..p * p * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        for seq in [
            flatten_spectral_priority(&cube, p, k).unwrap(),
            flatten_spatial_priority(&cube, p, k).unwrap(),
        ] {
            let mut a = cube.clone();
            let mut b = seq.values.clone();
            a.sort_by(Real::total_cmp);
            b.sort_by(Real::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn spatial_is_fixed_transpose_permutation_of_spectral() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in 1..=8usize {
            for k in 1..=8usize {
                let cube: Vec<Real> =
                    (0..p * p * k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let spe = flatten_spectral_priority(&cube, p, k).unwrap();
                let spa = flatten_spatial_priority(&cube, p, k).unwrap();
                // Transpose of the P^2 x K matrix read out of spe.
                for band in 0..k {
                    for sp in 0..p * p {
                        assert_eq!(spa.values[band * p * p + sp], spe.values[sp * k + band]);
                    }
                }
            }
        }
    }

    #[test]
    fn flatten_rejects_empty() {
        assert!(flatten_spectral_priority(&[], 0, 0).is_err());
        assert!(flatten_spatial_priority(&[], 2, 0).is_err());
    }

    #[test]
    fn revert_reverses_values() {
        let seq = FlatSequence {
            values: vec![1.0, 2.0, 3.0],
            order: FlattenOrder::Spectral,
            direction: Direction::Forward,
            index_map: SeqIndexMap::spectral(1, 3),
        };
        let r = revert(&seq);
        assert_eq!(r.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(r.direction, Direction::Reversed);
    }

    #[test]
    fn revert_is_an_involution() {
        let cube: Vec<Real> = (0..12).map(|v| v as Real).collect();
        let seq = flatten_spatial_priority(&cube, 2, 3).unwrap();
        let back = revert(&revert(&seq));
        assert_eq!(back, seq);
    }

    #[test]
    fn revert_flips_index_map_even_for_palindromic_values() {
        let seq = FlatSequence {
            values: vec![1.0, 2.0, 1.0],
            order: FlattenOrder::Spectral,
            direction: Direction::Forward,
            index_map: SeqIndexMap::spectral(1, 3),
        };
        let r = revert(&seq);
        assert_eq!(r.values, seq.values);
        assert_eq!(
            r.index_map.entries(),
            seq.index_map.reversed().entries()
        );
    }

    #[test]
    fn index_maps_are_bijections_and_unflatten_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in 1..=8usize {
            for k in 1..=8usize {
                let cube: Vec<Real> =
                    (0..p * p * k).map(|_| rng.random_range(-1.0..1.0)).collect();
                for flatten in [flatten_spectral_priority, flatten_spatial_priority] {
                    let seq = flatten(&cube, p, k).unwrap();
                    assert!(seq.index_map.is_bijection());
                    assert_eq!(unflatten(&seq.values, &seq.index_map).unwrap(), cube);
                    let rev = revert(&seq);
                    assert!(rev.index_map.is_bijection());
                    assert_eq!(unflatten(&rev.values, &rev.index_map).unwrap(), cube);
                }
            }
        }
    }

    #[test]
    fn route_branch_sets_match_contract() {
        use Direction::*;
        use FlattenOrder::*;
        assert_eq!(
            RouteId::CrossSpatialSpectral.branch_specs(),
            &[(Spatial, Forward), (Spectral, Reversed)]
        );
        assert_eq!(RouteId::ParallelSpectralSpatial.branch_count(), 4);
        for route in RouteId::all() {
            let n = route.branch_count();
            assert!(n == 2 || n == 4);
        }
    }

    #[test]
    fn degenerate_batch_sequences() {
        // M=1, P=1, K=3: spectral forward is the band order, spatial
        // reversed is the band order flipped.
        let batch = TokenBatch::new(1, 1, 3, vec![10.0, 20.0, 30.0]).unwrap();
        let seqs = build_route_sequences(&batch, RouteId::CrossSpectralSpatial).unwrap();
        assert_eq!(seqs[0].steps, vec![10.0, 20.0, 30.0]);
        assert_eq!(seqs[1].steps, vec![30.0, 20.0, 10.0]);
    }

    #[test]
    fn sequences_have_length_p2_k() {
        let batch = TokenBatch::zeros(3, 4, 5);
        for route in RouteId::all() {
            for seq in build_route_sequences(&batch, route).unwrap() {
                assert_eq!(seq.index_map.len(), 4 * 4 * 5);
                assert_eq!(seq.steps.len(), 4 * 4 * 5 * 3);
            }
        }
    }

    fn random_batch(m: usize, p: usize, k: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * p * p * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenBatch::new(m, p, k, data).unwrap()
    }

    #[test]
    fn identity_stub_doubles_or_quadruples_exactly() {
        let batch = random_batch(2, 3, 4, 100);
        for route in RouteId::all() {
            let out = scan_and_merge_with(&batch, route, |_, seq| Ok(seq.steps.clone())).unwrap();
            let factor = route.branch_count() as Real;
            for (o, i) in out.data().iter().zip(batch.data()) {
                assert_eq!(*o, factor * i, "route {route}");
            }
        }
    }

    #[test]
    fn scan_and_merge_matches_explicit_bookkeeping_oracle() {
        // Oracle: scan each branch with the reference selective scan and
        // re-place values by explicit (row, col, band) arithmetic.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (m, p, k) = (3usize, 2usize, 3usize);
        let batch = random_batch(m, p, k, 41);
        let l = batch.seq_len();
        for route in [RouteId::CrossSpectralSpatial, RouteId::ParallelSpectralSpatial] {
            let params: Vec<S6Params<Real>> = (0..route.branch_count())
                .map(|_| S6Params {
                    feature_size: m,
                    state_size: 2,
                    a_diag: (0..m * 2).map(|_| -rng.random_range(0.1..1.5)).collect(),
                    w_b: (0..2 * m).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    b_b: vec![0.1, -0.2],
                    w_c: (0..2 * m).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    b_c: vec![0.3, 0.2],
                    w_delta: (0..m).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    b_delta: 0.0,
                })
                .collect();
            let got = scan_and_merge(&batch, route, &params).unwrap();

            let mut oracle = vec![0.0; m * l];
            for (bi, &(order, direction)) in route.branch_specs().iter().enumerate() {
                // Enumerate (spatial, band) pairs in this branch's order.
                let mut pairs: Vec<(usize, usize)> = match order {
                    FlattenOrder::Spectral => (0..p * p)
                        .flat_map(|sp| (0..k).map(move |b| (sp, b)))
                        .collect(),
                    FlattenOrder::Spatial => (0..k)
                        .flat_map(|b| (0..p * p).map(move |sp| (sp, b)))
                        .collect(),
                };
                if direction == Direction::Reversed {
                    pairs.reverse();
                }
                let mut steps = vec![0.0; l * m];
                for (t, &(sp, b)) in pairs.iter().enumerate() {
                    let (row, col) = (sp / p, sp % p);
                    for j in 0..m {
                        steps[t * m + j] = batch.at(j, row, col, b);
                    }
                }
                let y = ssm::s6_selective_scan(&steps, l, &params[bi]).unwrap();
                for (t, &(sp, b)) in pairs.iter().enumerate() {
                    for j in 0..m {
                        oracle[j * l + sp * k + b] += y[t * m + j];
                    }
                }
            }
            for (g, o) in got.data().iter().zip(&oracle) {
                assert!((g - o).abs() < 1e-12, "route {route}: {g} vs {o}");
            }
        }
    }

    #[test]
    fn scan_and_merge_preserves_shape_for_all_routes() {
        let batch = random_batch(2, 3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for route in RouteId::all() {
            let params: Vec<S6Params<Real>> = (0..route.branch_count())
                .map(|_| S6Params {
                    feature_size: 2,
                    state_size: 3,
                    a_diag: (0..6).map(|_| -rng.random_range(0.1..1.0)).collect(),
                    w_b: (0..6).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    b_b: vec![0.0; 3],
                    w_c: (0..6).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    b_c: vec![0.0; 3],
                    w_delta: vec![0.1, -0.1],
                    b_delta: -0.5,
                })
                .collect();
            let out = scan_and_merge(&batch, route, &params).unwrap();
            assert_eq!((out.m(), out.p(), out.k()), (2, 3, 2));
        }
    }

    #[test]
    fn scan_and_merge_rejects_wrong_feature_size() {
        let batch = random_batch(2, 2, 2, 9);
        let params = vec![
            S6Params {
                feature_size: 3,
                state_size: 2,
                a_diag: vec![-1.0; 6],
                w_b: vec![0.0; 6],
                b_b: vec![0.0; 2],
                w_c: vec![0.0; 6],
                b_c: vec![0.0; 2],
                w_delta: vec![0.0; 3],
                b_delta: 0.0,
            };
            2
        ];
        assert!(scan_and_merge(&batch, RouteId::SpectralPriority, &params).is_err());
    }

    #[test]
    fn csv_dump_has_expected_rows() {
        let csv = index_map_csv(FlattenOrder::Spectral, Direction::Forward, 2, 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "seq_pos,p_row,p_col,k");
        assert_eq!(lines.len(), 1 + 8);
        assert_eq!(lines[1], "0,0,0,0");
        assert_eq!(lines[2], "1,0,0,1");
        assert_eq!(lines[3], "2,0,1,0");
    }
}
