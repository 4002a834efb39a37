use serde::{Deserialize, Serialize};

use super::{RefineError, Template};
use crate::grid::neighbors4;
use crate::layout::{Layout, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementCost {
    /// Template pixels that land on any non-background label.
    pub overlap: f64,
    /// Squared distance to the category's current geometric center.
    pub center: f64,
    /// Squared distance to the matching insertion in the previous frame.
    pub temporal: f64,
    pub total: f64,
}

/// Geometric center of the category's pixels in `frame`, or the grid center when it has none.
pub fn category_center(layout: &Layout, label: u16, frame: usize) -> (f64, f64) {
    let w = layout.grid_w;
    let (mut sr, mut sc, mut n) = (0usize, 0usize, 0usize);
    for (p, &l) in layout.frames[frame].iter().enumerate() {
        if l == label {
            sr += p / w;
            sc += p % w;
            n += 1;
        }
    }
    if n == 0 {
        ((layout.grid_h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
    } else {
        (sr as f64 / n as f64, sc as f64 / n as f64)
    }
}

fn cost_at(
    center: (usize, usize),
    pixels: &[usize],
    grid: &[u16],
    c0: (f64, f64),
    prev: Option<(f64, f64)>,
    lambda: f64,
) -> PlacementCost {
    let overlap = pixels.iter().filter(|&&p| grid[p] != BACKGROUND).count() as f64;
    let (r, c) = (center.0 as f64, center.1 as f64);
    let center_term = (r - c0.0).powi(2) + (c - c0.1).powi(2);
    let temporal = prev.map_or(0.0, |p| (r - p.0).powi(2) + (c - p.1).powi(2));
    PlacementCost {
        overlap,
        center: center_term,
        temporal,
        total: overlap + center_term + lambda * temporal,
    }
}

/// Cost of anchoring `template` at `center` for `label` in `frame`.
/// `prev_center` is ignored on the first frame.
pub fn placement_cost(
    center: (usize, usize),
    template: &Template,
    layout: &Layout,
    label: u16,
    frame: usize,
    prev_center: Option<(f64, f64)>,
    lambda: f64,
) -> Result<PlacementCost, RefineError> {
    layout.check(label, frame)?;
    let pixels = template
        .pixels_at(center, layout.grid_h, layout.grid_w)
        .ok_or(RefineError::OutOfBounds {
            row: center.0,
            col: center.1,
        })?;
    let prev = if frame > 0 { prev_center } else { None };
    Ok(cost_at(
        center,
        &pixels,
        &layout.frames[frame],
        category_center(layout, label, frame),
        prev,
        lambda,
    ))
}

/// True when painting `pixels` with `label` adds exactly one instance of it and
/// leaves every other category's count unchanged.
pub(crate) fn admissible(
    layout: &Layout,
    label: u16,
    frame: usize,
    pixels: &[usize],
    counts: &[(u16, usize)],
) -> bool {
    let grid = &layout.frames[frame];
    let (h, w) = (layout.grid_h, layout.grid_w);
    let touches_own = pixels
        .iter()
        .any(|&p| grid[p] == label || neighbors4(p, h, w).any(|q| grid[q] == label));
    if touches_own {
        return false;
    }
    let mut hit: Vec<u16> = pixels
        .iter()
        .map(|&p| grid[p])
        .filter(|&l| l != BACKGROUND)
        .collect();
    if hit.is_empty() {
        return true;
    }
    hit.sort_unstable();
    hit.dedup();
    let mut trial = grid.clone();
    for &p in pixels {
        trial[p] = label;
    }
    hit.iter().all(|&other| {
        let before = counts
            .iter()
            .find(|(l, _)| *l == other)
            .map_or(0, |(_, n)| *n);
        crate::grid::components4(h, w, |p| trial[p] == other).len() == before
    })
}

/// Candidate centers on the stride grid (multiples of `stride`) where the template fits.
pub(crate) fn candidates(
    template: &Template,
    grid_h: usize,
    grid_w: usize,
    stride: usize,
) -> Vec<(usize, usize)> {
    let (r0, r1, c0, c1) = template.bounds();
    let mut out = Vec::new();
    for r in (0..grid_h).step_by(stride) {
        if (r as i64) + r0 < 0 || (r as i64) + r1 >= grid_h as i64 {
            continue;
        }
        for c in (0..grid_w).step_by(stride) {
            if (c as i64) + c0 >= 0 && (c as i64) + c1 < grid_w as i64 {
                out.push((r, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub center: (usize, usize),
    pub pixels: Vec<usize>,
    pub cost: PlacementCost,
}

/// Best admissible center for `template`, without modifying the layout.
pub fn best_placement(
    layout: &Layout,
    label: u16,
    frame: usize,
    template: &Template,
    prev_center: Option<(f64, f64)>,
    lambda: f64,
    stride: usize,
) -> Result<Option<Placement>, RefineError> {
    layout.check(label, frame)?;
    if stride == 0 {
        return Err(RefineError::InvalidParameter(
            "stride must be at least 1".into(),
        ));
    }
    let prev = if frame > 0 { prev_center } else { None };
    let c0 = category_center(layout, label, frame);
    let counts: Vec<(u16, usize)> = layout
        .labels
        .keys()
        .map(|&l| (l, layout.count(l, frame)))
        .collect();
    let grid = &layout.frames[frame];
    let mut best: Option<Placement> = None;
    for center in candidates(template, layout.grid_h, layout.grid_w, stride) {
        let pixels = template
            .pixels_at(center, layout.grid_h, layout.grid_w)
            .expect("candidate fits");
        let cost = cost_at(center, &pixels, grid, c0, prev, lambda);
        if best.as_ref().is_some_and(|b| cost.total >= b.cost.total) {
            continue;
        }
        if admissible(layout, label, frame, &pixels, &counts) {
            best = Some(Placement {
                center,
                pixels,
                cost,
            });
        }
    }
    Ok(best)
}

/// Paints `template` at the cheapest admissible center on the stride grid
/// (ties: smallest row, then column).
pub fn place_instance(
    mut layout: Layout,
    label: u16,
    frame: usize,
    template: &Template,
    prev_center: Option<(f64, f64)>,
    lambda: f64,
    stride: usize,
) -> Result<(Layout, Placement), RefineError> {
    let placement = best_placement(&layout, label, frame, template, prev_center, lambda, stride)?
        .ok_or(RefineError::NoValidPlacement { label, frame })?;
    for &p in &placement.pixels {
        layout.frames[frame][p] = label;
    }
    Ok((layout, placement))
}

/// Sets the smallest region (ties: lowest top-left pixel) to background.
pub fn remove_smallest(
    mut layout: Layout,
    label: u16,
    frame: usize,
) -> Result<(Layout, Vec<usize>), RefineError> {
    layout.check(label, frame)?;
    let region = super::template::smallest_region(&layout, label, frame)
        .ok_or(RefineError::NoRegion { label, frame })?;
    for &p in &region {
        layout.frames[frame][p] = BACKGROUND;
    }
    Ok((layout, region))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_with(h: usize, w: usize, blobs: &[(&str, &[usize])]) -> Layout {
        let mut l = Layout::new(1, h, w);
        for (name, pixels) in blobs {
            let label = l.register(name, None, None);
            for &p in *pixels {
                l.frames[0][p] = label;
            }
        }
        l
    }

    #[test]
    fn removes_smallest_then_earliest() {
        let l = layout_with(10, 10, &[("cat", &[0, 1, 2, 10, 11, 12, 20, 21, 22])]);
        let mut l = l;
        for p in [50, 51, 60, 61, 7, 8, 17, 18] {
            l.frames[0][p] = 1;
        }
        let (l, removed) = remove_smallest(l, 1, 0).unwrap();
        assert_eq!(removed, vec![7, 8, 17, 18]);
        assert_eq!(l.count(1, 0), 2);
        let (l, removed) = remove_smallest(l, 1, 0).unwrap();
        assert_eq!(removed, vec![50, 51, 60, 61]);
        let (l, _) = remove_smallest(l, 1, 0).unwrap();
        assert!(matches!(
            remove_smallest(l, 1, 0),
            Err(RefineError::NoRegion { .. })
        ));
    }

    #[test]
    fn cost_formula() {
        // cat occupies (2,2) only, so c0 = (2, 2); dog blocks three template cells
        let mut l = layout_with(9, 9, &[("cat", &[20])]);
        let dog = l.register("dog", None, None);
        for p in [3 * 9 + 3, 3 * 9 + 4, 4 * 9 + 4] {
            l.frames[0][p] = dog;
        }
        let t = Template {
            offsets: vec![(0, 0), (0, 1), (1, 1)],
            origin: super::super::TemplateOrigin::Circle { radius: 0 },
        };
        let c = placement_cost((3, 3), &t, &l, 1, 0, Some((0.0, 0.0)), 8.0).unwrap();
        assert_eq!(
            (c.overlap, c.center, c.temporal, c.total),
            (3.0, 2.0, 0.0, 5.0)
        );
        let c = placement_cost((3, 4), &t, &l, 1, 0, None, 8.0).unwrap();
        assert_eq!(c.total, 1.0 + 5.0);
        assert!(matches!(
            placement_cost((8, 8), &t, &l, 1, 0, None, 8.0),
            Err(RefineError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn empty_layout_places_at_center() {
        let mut l = Layout::new(1, 9, 9);
        let cat = l.register("cat", None, None);
        let (l, p) = place_instance(l, cat, 0, &Template::circle(1), None, 8.0, 1).unwrap();
        assert_eq!(p.center, (4, 4));
        assert_eq!(p.cost.total, 0.0);
        assert_eq!(l.count(cat, 0), 1);
    }

    #[test]
    fn avoids_touching_own_category() {
        // cat blob sits at the center; a new circle must not merge into it
        let mut l = Layout::new(1, 11, 11);
        let cat = l.register("cat", None, None);
        for p in [5 * 11 + 5, 5 * 11 + 6, 6 * 11 + 5, 6 * 11 + 6] {
            l.frames[0][p] = cat;
        }
        let (l, _) = place_instance(l, cat, 0, &Template::circle(1), None, 8.0, 1).unwrap();
        assert_eq!(l.count(cat, 0), 2);
    }

    #[test]
    fn no_room_is_an_error() {
        let mut l = Layout::new(1, 3, 3);
        let cat = l.register("cat", None, None);
        assert!(matches!(
            place_instance(l, cat, 0, &Template::circle(2), None, 8.0, 1),
            Err(RefineError::NoValidPlacement { .. })
        ));
    }
}
