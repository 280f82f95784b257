//! Assembles encoder inputs from rendered views: per-point input tables,
//! 3D and image-grid neighbourhoods, and the spliced rows of disturbed pairs.

use crate::augment::View;
use crate::geom;
use crate::model::{BranchInput, FusionMode, Row, SampleBlock};
use crate::scene::RgbdImage;

/// Which channels each branch may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modality {
    pub geometry: bool,
    pub color: bool,
}

impl Modality {
    pub const BOTH: Modality = Modality {
        geometry: true,
        color: true,
    };
    pub const GEOMETRY: Modality = Modality {
        geometry: true,
        color: false,
    };
    pub const COLOR: Modality = Modality {
        geometry: false,
        color: true,
    };
}

/// Channel visibility of the (point, pixel) branches for a fusion mode.
/// Late fusion keeps each branch on its own modality.
pub fn branch_modalities(fusion: FusionMode) -> (Modality, Modality) {
    match fusion {
        FusionMode::Late => (Modality::GEOMETRY, Modality::COLOR),
        FusionMode::Early | FusionMode::Hybrid => (Modality::BOTH, Modality::BOTH),
    }
}

/// Point-branch row: `[x, y, z] / extent ‖ rgb − 0.5`.
fn point_row(p: geom::Vec3, c: geom::Vec3, extent: f64, m: Modality) -> Row {
    let g = if m.geometry { 1.0 } else { 0.0 };
    let k = if m.color { 1.0 } else { 0.0 };
    [
        g * p[0] / extent,
        g * p[1] / extent,
        g * p[2] / extent,
        k * (c[0] - 0.5),
        k * (c[1] - 0.5),
        k * (c[2] - 0.5),
    ]
}

/// Pixel-branch row: `u/W − 0.5, v/H − 0.5 ‖ rgb − 0.5 ‖ depth/extent − 3`.
fn pixel_row(img: &RgbdImage, pixel: usize, rgb: geom::Vec3, extent: f64, m: Modality) -> Row {
    let g = if m.geometry { 1.0 } else { 0.0 };
    let k = if m.color { 1.0 } else { 0.0 };
    let [u, v] = img.uv[pixel];
    [
        g * (u / img.width as f64 - 0.5),
        g * (v / img.height as f64 - 0.5),
        k * (rgb[0] - 0.5),
        k * (rgb[1] - 0.5),
        k * (rgb[2] - 0.5),
        g * (img.depth[pixel] / extent - 3.0),
    ]
}

/// Input tables of one view, indexed by point index. Pixel rows of points
/// that are not visible are zero and never referenced.
#[derive(Debug, Clone)]
pub struct ViewTables {
    pub point: Vec<Row>,
    pub pixel: Vec<Row>,
    pub point_mod: Modality,
    pub pixel_mod: Modality,
}

impl ViewTables {
    pub fn new(view: &View, fusion: FusionMode) -> Self {
        let (point_mod, pixel_mod) = branch_modalities(fusion);
        let s = &view.scene;
        let e = view.base_extent;
        let point = s
            .points
            .iter()
            .zip(&s.colors)
            .map(|(&p, &c)| point_row(p, c, e, point_mod))
            .collect();
        let pixel = view
            .pixel_of
            .iter()
            .enumerate()
            .map(|(i, px)| match px {
                Some(px) => pixel_row(&view.image, *px, s.colors[i], e, pixel_mod),
                None => [0.0; 6],
            })
            .collect();
        Self {
            point,
            pixel,
            point_mod,
            pixel_mod,
        }
    }
}

/// The `k` nearest other points, nearest first, ties to the lower index.
pub fn point_neighbors(points: &[geom::Vec3], i: usize, k: usize) -> Vec<usize> {
    let c = points[i];
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &p)| (geom::dist2(c, p), j))
        .collect();
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Point indices of the `k` occupied pixels nearest to `pixel` in the image
/// grid (Euclidean pixel distance, ties to the lower pixel index), excluding
/// `pixel` itself.
pub fn pixel_neighbors(img: &RgbdImage, pixel: usize, k: usize) -> Vec<usize> {
    let (w, h) = (img.width as i64, img.height as i64);
    let (pu, pv) = ((pixel % img.width) as i64, (pixel / img.width) as i64);
    let max_r = w.max(h);
    let mut found: Vec<(i64, usize)> = Vec::new();
    for r in 1..=max_r {
        found.clear();
        for v in (pv - r).max(0)..=(pv + r).min(h - 1) {
            for u in (pu - r).max(0)..=(pu + r).min(w - 1) {
                let q = (v * w + u) as usize;
                if q != pixel && img.corr[q] >= 0 {
                    found.push(((u - pu).pow(2) + (v - pv).pow(2), q));
                }
            }
        }
        // Every pixel outside the window is farther than r.
        let within = found.iter().filter(|(d2, _)| *d2 <= r * r).count();
        if within >= k || r == max_r {
            break;
        }
    }
    found.sort_unstable();
    found.truncate(k);
    found.into_iter().map(|(_, q)| img.corr[q] as usize).collect()
}

/// Neighbourhoods of a set of query points in both metrics.
#[derive(Debug, Clone, Default)]
pub struct Neighborhoods {
    pub point: Vec<Vec<usize>>,
    pub pixel: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn compute(view: &View, queries: &[usize], k: usize, with_pixel: bool) -> Self {
        let point = queries
            .iter()
            .map(|&i| point_neighbors(&view.scene.points, i, k))
            .collect();
        let pixel = if with_pixel {
            queries
                .iter()
                .map(|&i| match view.pixel_of[i] {
                    Some(px) => pixel_neighbors(&view.image, px, k),
                    None => Vec::new(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { point, pixel }
    }
}

/// Block over existing rows of a view.
pub fn plain_block<'a>(tables: &'a ViewTables, queries: &[usize], nb: &Neighborhoods) -> SampleBlock<'a> {
    SampleBlock {
        point: Some(BranchInput::new(&tables.point, queries.to_vec(), nb.point.clone())),
        pixel: (!nb.pixel.is_empty()).then(|| BranchInput::new(&tables.pixel, queries.to_vec(), nb.pixel.clone())),
    }
}

/// Block of disturbed samples: slot `k` keeps the geometry of `queries[k]`
/// and takes the colour of `partners[k]`. Neighbourhoods are those of the
/// geometry point.
pub fn disturbed_block<'a>(
    tables: &'a ViewTables,
    view: &View,
    queries: &[usize],
    partners: &[usize],
    nb: &Neighborhoods,
) -> SampleBlock<'a> {
    let n = tables.point.len();
    let spliced: Vec<usize> = (n..n + queries.len()).collect();
    let colors = &view.scene.colors;
    let point_extra = queries
        .iter()
        .zip(partners)
        .map(|(&q, &d)| splice(tables.point[q], colors[d], 3, tables.point_mod))
        .collect();
    let point = BranchInput {
        base: &tables.point,
        extra: point_extra,
        queries: spliced.clone(),
        neighbors: nb.point.clone(),
    };
    let pixel = (!nb.pixel.is_empty()).then(|| BranchInput {
        base: &tables.pixel,
        extra: queries
            .iter()
            .zip(partners)
            .map(|(&q, &d)| splice(tables.pixel[q], colors[d], 2, tables.pixel_mod))
            .collect(),
        queries: spliced,
        neighbors: nb.pixel.clone(),
    });
    SampleBlock {
        point: Some(point),
        pixel,
    }
}

fn splice(mut row: Row, color: geom::Vec3, offset: usize, m: Modality) -> Row {
    if m.color {
        for c in 0..3 {
            row[offset + c] = color[c] - 0.5;
        }
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{make_views, AugmentConfig};
    use crate::scene::{generate_scene, Scene, SceneConfig};

    #[test]
    fn point_neighbors_match_sorted_scan() {
        let s = generate_scene(2, &SceneConfig::default()).unwrap();
        for i in [0, 100, 1023] {
            let nb = point_neighbors(&s.points, i, 8);
            let mut all: Vec<(f64, usize)> = (0..s.len())
                .filter(|&j| j != i)
                .map(|j| (geom::dist2(s.points[i], s.points[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(8).map(|x| x.1).collect();
            assert_eq!(nb, want);
        }
    }

    #[test]
    fn pixel_neighbors_match_full_scan() {
        let s = generate_scene(2, &SceneConfig::default()).unwrap();
        let cfg = AugmentConfig::for_extent(s.extent);
        let (v1, _, _) = make_views(&s, &cfg, 1).unwrap();
        let img = &v1.image;
        for (px, _) in img.occupied().step_by(37) {
            let got = pixel_neighbors(img, px, 8);
            let (pu, pv) = ((px % img.width) as i64, (px / img.width) as i64);
            let mut all: Vec<(i64, usize)> = img
                .occupied()
                .filter(|&(q, _)| q != px)
                .map(|(q, _)| {
                    let (u, v) = ((q % img.width) as i64, (q / img.width) as i64);
                    ((u - pu).pow(2) + (v - pv).pow(2), q)
                })
                .collect();
            all.sort_unstable();
            let want: Vec<usize> = all.iter().take(8).map(|&(_, q)| img.corr[q] as usize).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn disturbed_rows_splice_geometry_and_color() {
        let s = generate_scene(3, &SceneConfig::default()).unwrap();
        let cfg = AugmentConfig::for_extent(s.extent);
        let (_, v2, corr) = make_views(&s, &cfg, 2).unwrap();
        let t = ViewTables::new(&v2, FusionMode::Hybrid);
        let q = vec![corr[0].1, corr[1].1];
        let d = vec![corr[5].1, corr[9].1];
        let nb = Neighborhoods::compute(&v2, &q, 4, true);
        let block = disturbed_block(&t, &v2, &q, &d, &nb);
        let pb = block.point.unwrap();
        for k in 0..2 {
            let row = pb.extra[k];
            assert_eq!(&row[..3], &t.point[q[k]][..3]);
            assert_eq!(&row[3..], &t.point[d[k]][3..]);
            assert_ne!(row, t.point[q[k]]);
        }
        let xb = block.pixel.unwrap();
        assert_eq!(xb.extra[0][0], t.pixel[q[0]][0]);
        assert_eq!(xb.extra[0][5], t.pixel[q[0]][5]);
        assert_eq!(&xb.extra[0][2..5], &t.point[d[0]][3..]);
    }

    #[test]
    fn late_fusion_masks_modalities() {
        let s: Scene = generate_scene(3, &SceneConfig::default()).unwrap();
        let cfg = AugmentConfig::for_extent(s.extent);
        let (v1, _, _) = make_views(&s, &cfg, 2).unwrap();
        let t = ViewTables::new(&v1, FusionMode::Late);
        assert!(t.point.iter().all(|r| r[3..].iter().all(|&v| v == 0.0)));
        assert!(t.pixel.iter().all(|r| r[0] == 0.0 && r[1] == 0.0 && r[5] == 0.0));
    }
}
