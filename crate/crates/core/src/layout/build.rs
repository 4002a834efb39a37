use super::{FocusMask, Layout, LayoutError, RegionSet, BACKGROUND};

/// Fraction of the region's pixels that lie inside the mask.
pub fn overlap_score(region: &[usize], mask: &FocusMask) -> Result<f64, LayoutError> {
    if region.is_empty() {
        return Err(LayoutError::EmptyRegion);
    }
    let hits = region.iter().filter(|&&p| mask.mask[p]).count();
    Ok(hits as f64 / region.len() as f64)
}

/// Writes every region whose overlap with `mask` reaches `tau` into `frame`
/// of `base` under `label`, returning the layout and the number retained.
///
/// A pixel already owned by another category goes to whichever region has the
/// higher overlap score; on a tie the earlier owner keeps it.
pub fn construct_layout(
    regions: &RegionSet,
    mask: &FocusMask,
    tau: f64,
    label: u16,
    mut base: Layout,
    frame: usize,
) -> Result<(Layout, usize), LayoutError> {
    base.check(label, frame)?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LayoutError::InvalidParameter(format!(
            "tau must lie in (0, 1], got {tau}"
        )));
    }
    for (what, h, w) in [
        ("regions", regions.grid_h, regions.grid_w),
        ("mask", mask.grid_h, mask.grid_w),
    ] {
        if (h, w) != (base.grid_h, base.grid_w) {
            return Err(LayoutError::GridMismatch(format!(
                "{what} grid {h}x{w} vs layout {}x{}",
                base.grid_h, base.grid_w
            )));
        }
    }
    let mut retained = 0;
    for region in &regions.regions {
        let score = overlap_score(region, mask)?;
        if score < tau {
            continue;
        }
        retained += 1;
        for &p in region {
            let current = base.frames[frame][p];
            if current != BACKGROUND && current != label && score <= base.owner_score(frame, p) {
                continue;
            }
            base.frames[frame][p] = label;
            base.set_owner_score(frame, p, score);
        }
    }
    Ok((base, retained))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(h: usize, w: usize, on: &[usize]) -> FocusMask {
        let mut m = FocusMask::empty(h, w);
        for &p in on {
            m.mask[p] = true;
        }
        m.cluster_count = 1;
        m
    }

    #[test]
    fn overlap_examples() {
        let m = mask_of(4, 4, &[0, 5, 6]);
        assert_eq!(overlap_score(&[0, 1, 2, 3], &m).unwrap(), 0.25);
        assert_eq!(overlap_score(&[5, 6], &m).unwrap(), 1.0);
        assert_eq!(overlap_score(&[15], &m).unwrap(), 0.0);
        assert!(matches!(
            overlap_score(&[], &m),
            Err(LayoutError::EmptyRegion)
        ));
    }

    #[test]
    fn threshold_keeps_two_of_three() {
        // 10x10 grid, three 20-pixel regions with overlaps 0.5, 0.15, 0.9
        let region = |row0: usize| -> Vec<usize> { (row0 * 10..row0 * 10 + 20).collect() };
        let regions = RegionSet {
            grid_h: 10,
            grid_w: 10,
            regions: vec![region(0), region(3), region(6)],
        };
        let mut on: Vec<usize> = (0..10).collect();
        on.extend(30..33);
        on.extend(60..78);
        let mask = mask_of(10, 10, &on);
        let scores: Vec<f64> = regions
            .regions
            .iter()
            .map(|r| overlap_score(r, &mask).unwrap())
            .collect();
        assert_eq!(scores, vec![0.5, 0.15, 0.9]);

        let mut base = Layout::new(1, 10, 10);
        let cat = base.register("cat", Some(1), Some(2));
        let (layout, retained) = construct_layout(&regions, &mask, 0.2, cat, base, 0).unwrap();
        assert_eq!(retained, 2);
        assert_eq!(layout.count(cat, 0), 2);
        assert!(layout.frames[0][30..50].iter().all(|&l| l == BACKGROUND));
    }

    #[test]
    fn empty_mask_retains_nothing() {
        let regions = RegionSet {
            grid_h: 3,
            grid_w: 3,
            regions: vec![vec![0, 1], vec![7, 8]],
        };
        let mut base = Layout::new(1, 3, 3);
        let cat = base.register("cat", None, None);
        let (layout, retained) =
            construct_layout(&regions, &FocusMask::empty(3, 3), 0.2, cat, base, 0).unwrap();
        assert_eq!(retained, 0);
        assert_eq!(layout.count(cat, 0), 0);
    }

    #[test]
    fn collision_goes_to_higher_score() {
        let regions = RegionSet {
            grid_h: 2,
            grid_w: 4,
            regions: vec![vec![0, 1, 2, 3]],
        };
        let mut base = Layout::new(1, 2, 4);
        let cat = base.register("cat", None, None);
        let dog = base.register("dog", None, None);
        let (base, _) =
            construct_layout(&regions, &mask_of(2, 4, &[0, 1]), 0.2, cat, base, 0).unwrap();
        // dog scores 0.5 as well: tie keeps cat
        let (tied, _) =
            construct_layout(&regions, &mask_of(2, 4, &[2, 3]), 0.2, dog, base.clone(), 0).unwrap();
        assert!(tied.frames[0][..4].iter().all(|&l| l == cat));
        let (won, _) =
            construct_layout(&regions, &mask_of(2, 4, &[0, 1, 2]), 0.2, dog, base, 0).unwrap();
        assert!(won.frames[0][..4].iter().all(|&l| l == dog));
    }

    #[test]
    fn rejects_bad_tau_and_label() {
        let regions = RegionSet {
            grid_h: 2,
            grid_w: 2,
            regions: vec![],
        };
        let mut base = Layout::new(1, 2, 2);
        let cat = base.register("cat", None, None);
        let mask = FocusMask::empty(2, 2);
        assert!(construct_layout(&regions, &mask, 0.0, cat, base.clone(), 0).is_err());
        assert!(construct_layout(&regions, &mask, 1.5, cat, base.clone(), 0).is_err());
        assert!(matches!(
            construct_layout(&regions, &mask, 0.2, 9, base, 0),
            Err(LayoutError::UnknownLabel(9))
        ));
    }
}
