use num_complex::Complex64;
use rayon::prelude::*;

use super::{dft_codebook, wide_beam_synthesize, Beam, Codebook, CodebookError, CodebookKind, WideBeamOptions};
use crate::rng::{sub_stream, Purpose};

/// Tiered search codebook. The last tier is the DFT codebook and
/// `child_map[t][b]` lists the tier `t + 1` children of beam `b` in tier `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalCodebook {
    tiers: Vec<Codebook>,
    child_map: Vec<Vec<Vec<usize>>>,
}

/// Sine interval covered by sector `w` out of `n_sectors`, for an `n_t`-beam
/// leaf grid. Sectors tile the leaf cells `[s_i - 1/n_t, s_i + 1/n_t)`, so
/// they start half a grid step below -1.
pub fn sector_bounds(w: usize, n_sectors: usize, n_t: usize) -> [f64; 2] {
    let lo = -1.0 - 1.0 / n_t as f64 + 2.0 * w as f64 / n_sectors as f64;
    [lo, lo + 2.0 / n_sectors as f64]
}

/// Sector (out of `n_sectors`) whose interval contains the steering sine of
/// leaf beam `i`; exact boundary ties go to the lower sector.
pub fn sector_of_leaf(i: usize, n_sectors: usize, n_t: usize) -> usize {
    // sine offset from the first sector start is (2i + 1)/n_t; the sector is
    // ceil((2i + 1) n_sectors / (2 n_t)) - 1, computed exactly.
    let num = (2 * i + 1) * n_sectors;
    let den = 2 * n_t;
    (num.div_ceil(den)).saturating_sub(1).min(n_sectors - 1)
}

impl HierarchicalCodebook {
    pub fn new(tiers: Vec<Codebook>, child_map: Vec<Vec<Vec<usize>>>) -> Self {
        assert_eq!(child_map.len() + 1, tiers.len(), "one child map per non-leaf tier");
        Self { tiers, child_map }
    }

    pub fn tiers(&self) -> &[Codebook] {
        &self.tiers
    }

    pub fn n_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn tier(&self, t: usize) -> &Codebook {
        &self.tiers[t]
    }

    pub fn leaf(&self) -> &Codebook {
        self.tiers.last().expect("at least one tier")
    }

    pub fn children(&self, tier: usize, beam: usize) -> &[usize] {
        &self.child_map[tier][beam]
    }

    pub fn child_map(&self) -> &[Vec<Vec<usize>>] {
        &self.child_map
    }

    /// Largest number of children under one beam of `tier`.
    pub fn max_group_size(&self, tier: usize) -> usize {
        self.child_map[tier].iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Leaf indices reachable from beam `beam` of tier `tier`.
    pub fn leaves_under(&self, tier: usize, beam: usize) -> Vec<usize> {
        let mut frontier = vec![beam];
        for t in tier..self.child_map.len() {
            frontier = frontier
                .iter()
                .flat_map(|&b| self.child_map[t][b].iter().copied())
                .collect();
        }
        frontier
    }
}

fn leaf_groups(n_t: usize, n_sectors: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_sectors];
    for i in 0..n_t {
        groups[sector_of_leaf(i, n_sectors, n_t)].push(i);
    }
    groups
}

/// Two tiers: `n_wide` synthesized wide beams over equal contiguous sine
/// sectors, then the `n_t`-beam DFT codebook.
pub fn build_two_tier(
    m: usize,
    n_t: usize,
    n_wide: usize,
    opts: &WideBeamOptions,
) -> Result<HierarchicalCodebook, CodebookError> {
    if n_wide == 0 || n_wide > n_t {
        return Err(CodebookError::BadWideCount { n_wide, n_t });
    }
    let leaf = dft_codebook(m, n_t, opts.spacing_over_lambda)?;
    let wide = (0..n_wide)
        .into_par_iter()
        .map(|w| {
            let mut rng = sub_stream(opts.seed, Purpose::Codebook, n_wide as u64, w as u64);
            wide_beam_synthesize(m, sector_bounds(w, n_wide, n_t), opts, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HierarchicalCodebook::new(
        vec![Codebook::new(CodebookKind::Wide, wide)?, leaf],
        vec![leaf_groups(n_t, n_wide)],
    ))
}

fn check_power_of_two(n_t: usize) -> Result<usize, CodebookError> {
    if n_t < 2 || !n_t.is_power_of_two() {
        return Err(CodebookError::NotPowerOfTwo(n_t));
    }
    Ok(n_t.trailing_zeros() as usize)
}

fn binary_child_map(levels: usize) -> Vec<Vec<Vec<usize>>> {
    (1..levels)
        .map(|t| (0..(1usize << t)).map(|b| vec![2 * b, 2 * b + 1]).collect())
        .collect()
}

/// `log2(n_t)` tiers; tier `t` (0-based) holds `2^(t+1)` beams halving the
/// sine space and the last tier is the DFT codebook.
pub fn build_binary(m: usize, n_t: usize, opts: &WideBeamOptions) -> Result<HierarchicalCodebook, CodebookError> {
    let levels = check_power_of_two(n_t)?;
    let mut tiers = Vec::with_capacity(levels);
    for t in 1..levels {
        let count = 1usize << t;
        let beams = (0..count)
            .into_par_iter()
            .map(|b| {
                let mut rng = sub_stream(opts.seed, Purpose::Codebook, 1_000 + t as u64, b as u64);
                wide_beam_synthesize(m, sector_bounds(b, count, n_t), opts, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        tiers.push(Codebook::new(CodebookKind::Wide, beams)?);
    }
    tiers.push(dft_codebook(m, n_t, opts.spacing_over_lambda)?);
    Ok(HierarchicalCodebook::new(tiers, binary_child_map(levels)))
}

fn sector_sum(leaf: &Codebook, members: &[usize]) -> Beam {
    let m = leaf.array_size();
    let mut acc = vec![Complex64::new(0.0, 0.0); m];
    for &i in members {
        for (a, w) in acc.iter_mut().zip(leaf.beam(i).weights()) {
            *a += w;
        }
    }
    Beam::normalized(acc)
}

/// Two-tier fixture whose wide beams are normalized sums of their child DFT
/// beams. With `n_t == m` the leaf beams are orthogonal, so an on-grid
/// single-path channel lights exactly one sector.
pub fn ideal_sector_two_tier(
    m: usize,
    n_t: usize,
    n_wide: usize,
    spacing_over_lambda: f64,
) -> Result<HierarchicalCodebook, CodebookError> {
    if n_wide == 0 || n_wide > n_t {
        return Err(CodebookError::BadWideCount { n_wide, n_t });
    }
    let leaf = dft_codebook(m, n_t, spacing_over_lambda)?;
    let groups = leaf_groups(n_t, n_wide);
    let wide = groups.iter().map(|g| sector_sum(&leaf, g)).collect();
    Ok(HierarchicalCodebook::new(
        vec![Codebook::new(CodebookKind::IdealSector, wide)?, leaf],
        vec![groups],
    ))
}

/// Binary fixture with ideal sector beams, see [`ideal_sector_two_tier`].
pub fn ideal_sector_binary(
    m: usize,
    n_t: usize,
    spacing_over_lambda: f64,
) -> Result<HierarchicalCodebook, CodebookError> {
    let levels = check_power_of_two(n_t)?;
    let leaf = dft_codebook(m, n_t, spacing_over_lambda)?;
    let mut tiers = Vec::with_capacity(levels);
    for t in 1..levels {
        let count = 1usize << t;
        let block = n_t / count;
        let beams = (0..count)
            .map(|b| sector_sum(&leaf, &(b * block..(b + 1) * block).collect::<Vec<_>>()))
            .collect();
        tiers.push(Codebook::new(CodebookKind::IdealSector, beams)?);
    }
    tiers.push(leaf);
    Ok(HierarchicalCodebook::new(tiers, binary_child_map(levels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::dft_sine;

    fn fast() -> WideBeamOptions {
        WideBeamOptions {
            iters: 10,
            restarts: 0,
            ..Default::default()
        }
    }

    fn assert_partition(h: &HierarchicalCodebook) {
        for t in 0..h.n_tiers() - 1 {
            let mut seen = vec![0usize; h.tier(t + 1).len()];
            for b in 0..h.tier(t).len() {
                for &c in h.children(t, b) {
                    seen[c] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "tier {t} children are not a partition");
        }
    }

    #[test]
    fn two_tier_group_sizes_for_128_by_11() {
        let h = build_two_tier(64, 128, 11, &fast()).unwrap();
        assert_eq!(h.n_tiers(), 2);
        assert_eq!(h.max_group_size(0), 12);
        assert!(h.child_map()[0].iter().all(|g| g.len() == 11 || g.len() == 12));
        assert_eq!(h.tier(0).len() + h.max_group_size(0), 23);
        assert_partition(&h);
        for b in h.tier(0).beams() {
            assert!(b.modulus_deviation() < 1e-9);
        }
    }

    #[test]
    fn leaf_sines_lie_in_their_sectors() {
        for (n_t, n_w) in [(128, 11), (32, 4), (32, 5), (16, 16), (8, 3)] {
            for i in 0..n_t {
                let w = sector_of_leaf(i, n_w, n_t);
                let [lo, hi] = sector_bounds(w, n_w, n_t);
                let s = dft_sine(i, n_t);
                assert!(s > lo - 1e-12 && s <= hi + 1e-12, "n_t={n_t} n_w={n_w} i={i}");
            }
        }
    }

    #[test]
    fn degenerate_two_tier_has_singletons() {
        let h = ideal_sector_two_tier(8, 8, 8, 0.5).unwrap();
        assert!(h.child_map()[0].iter().all(|g| g.len() == 1));
        assert!(build_two_tier(8, 8, 0, &fast()).is_err());
        assert!(build_two_tier(8, 8, 9, &fast()).is_err());
    }

    #[test]
    fn binary_tree_shape() {
        let h = build_binary(8, 16, &fast()).unwrap();
        assert_eq!(h.n_tiers(), 4);
        for t in 0..4 {
            assert_eq!(h.tier(t).len(), 2 << t);
        }
        assert_partition(&h);
        // every leaf reachable by exactly one root-to-leaf path
        let mut count = [0; 16];
        for root in 0..2 {
            for leaf in h.leaves_under(0, root) {
                count[leaf] += 1;
            }
        }
        assert!(count.iter().all(|&c| c == 1));
        assert_eq!(
            build_binary(8, 12, &fast()).unwrap_err(),
            CodebookError::NotPowerOfTwo(12)
        );
        let two = build_binary(2, 2, &fast()).unwrap();
        assert_eq!(two.n_tiers(), 1);
        assert_eq!(two.leaf(), &dft_codebook(2, 2, 0.5).unwrap());
    }

    #[test]
    fn binary_sweep_count_for_128() {
        let h = ideal_sector_binary(64, 128, 0.5).unwrap();
        assert_eq!(h.n_tiers(), 7);
        assert_eq!(2 * h.n_tiers(), 14);
    }
}
