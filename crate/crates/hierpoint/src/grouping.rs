//! Entity grouping: center-point entity detection (heatmap / size / offset
//! heads over the fused feature), the word-to-entity relation head used in
//! pre-training, and inference-time assignment of words to detected boxes.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::autograd::{Arr, Graph, ParamStore, Var};
use crate::chargrid::{point_to_cell, FusedFeature, G_CHANNELS};
use crate::config::EtdConfig;
use crate::geom::{point_in_box, spatial_order, Point, Rect};
use crate::nn::{Conv2d, Linear};

/// Output map stride in image pixels: G is stride 8, upsampled once.
pub const ETD_STRIDE: f64 = 4.0;

/// One 3x3 conv -> ReLU -> 1x1 conv branch.
#[derive(Debug, Clone)]
pub struct ConvHead {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
}

impl ConvHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvHead {
            conv3: Conv2d::new(store, &format!("{name}.conv3"), cin, hidden, 3, 1, 1, rng),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), hidden, cout, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv3.forward(g, store, x);
        let a = g.relu(h);
        self.conv1.forward(g, store, a)
    }
}

/// Entity detection maps at twice the spatial resolution of G.
pub struct EtdMaps {
    pub heat_logits: Var,
    /// Sigmoid of the heatmap logits, `[1, 2h, 2w]`, values in `[0,1]`.
    pub heatmap: Var,
    pub log_size: Var,
    /// Exponential of the size logits (positive), `[2, 2h, 2w]`: (w, h) in
    /// output-map units.
    pub size: Var,
    /// Sub-cell fractional offsets, `[2, 2h, 2w]`: (dx, dy).
    pub offset: Var,
}

pub struct EtdHead {
    pub heat: ConvHead,
    pub size: ConvHead,
    pub offset: ConvHead,
}

impl EtdHead {
    pub fn new(store: &mut ParamStore, cfg: &EtdConfig, rng: &mut impl Rng) -> Self {
        EtdHead {
            heat: ConvHead::new(store, "etd.heat", G_CHANNELS, cfg.head_channels, 1, rng),
            size: ConvHead::new(store, "etd.size", G_CHANNELS, cfg.head_channels, 2, rng),
            offset: ConvHead::new(store, "etd.offset", G_CHANNELS, cfg.head_channels, 2, rng),
        }
    }

    /// Upsample G x2 and run the three branches.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: &FusedFeature) -> EtdMaps {
        let up = g.upsample_bilinear(fused.var, 2);
        let heat_logits = self.heat.forward(g, store, up);
        let heatmap = g.sigmoid(heat_logits);
        let log_size = self.size.forward(g, store, up);
        let size = g.exp(log_size);
        let offset = self.offset.forward(g, store, up);
        EtdMaps {
            heat_logits,
            heatmap,
            log_size,
            size,
            offset,
        }
    }
}

// ---- target rendering --------------------------------------------------------

/// Gaussian radius such that corners shifted by it still give IoU >=
/// `min_overlap` with the annotated box (the keypoint-detection convention).
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let a1 = 1.0;
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * a1 * c1).max(0.0).sqrt();
    let r1 = (b1 - sq1) / (2.0 * a1);

    let a2 = 4.0;
    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let sq2 = (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt();
    let r2 = (b2 - sq2) / (2.0 * a2);

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (-b3 + sq3) / (2.0 * a3);

    r1.min(r2).min(r3).max(0.0)
}

/// Max-combine a gaussian peak into a heatmap.
pub fn splat_gaussian(heat: &mut Array2<f64>, cy: usize, cx: usize, radius: f64) {
    let r = radius.floor().max(0.0) as isize;
    let sigma = (2.0 * r as f64 + 1.0) / 6.0;
    let (h, w) = heat.dim();
    for dy in -r..=r {
        for dx in -r..=r {
            let y = cy as isize + dy;
            let x = cx as isize + dx;
            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                continue;
            }
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let cell = &mut heat[[y as usize, x as usize]];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Rendered supervision for the detection heads.
pub struct EtdTargets {
    pub heat: Array2<f64>,
    /// (w, h) in output-map units at each center cell.
    pub size: Array3<f64>,
    /// Fractional center remainders at each center cell.
    pub offset: Array3<f64>,
    /// Center cells carrying size/offset supervision.
    pub center_cells: Vec<(usize, usize)>,
    pub n_entities: usize,
}

/// Render heatmap/size/offset targets for entity boxes (image pixels) onto a
/// stride-4 map of shape `(map_h, map_w)`. Centers outside the map are
/// clamped with a warning.
pub fn render_etd_targets(boxes: &[Rect], map_h: usize, map_w: usize) -> EtdTargets {
    let mut heat = Array2::zeros((map_h, map_w));
    let mut size = Array3::zeros((2, map_h, map_w));
    let mut offset = Array3::zeros((2, map_h, map_w));
    let mut center_cells = Vec::with_capacity(boxes.len());
    for b in boxes {
        let c = b.center();
        let mut mx = c.x / ETD_STRIDE;
        let mut my = c.y / ETD_STRIDE;
        if mx < 0.0 || my < 0.0 || mx >= map_w as f64 || my >= map_h as f64 {
            log::warn!("entity center ({mx:.2},{my:.2}) outside {map_h}x{map_w} map; clamping");
            mx = mx.clamp(0.0, map_w as f64 - 1e-6);
            my = my.clamp(0.0, map_h as f64 - 1e-6);
        }
        let cx = mx.floor() as usize;
        let cy = my.floor() as usize;
        let w_units = b.width() / ETD_STRIDE;
        let h_units = b.height() / ETD_STRIDE;
        let radius = gaussian_radius(h_units.ceil(), w_units.ceil(), 0.7);
        splat_gaussian(&mut heat, cy, cx, radius);
        heat[[cy, cx]] = 1.0;
        size[[0, cy, cx]] = w_units;
        size[[1, cy, cx]] = h_units;
        offset[[0, cy, cx]] = mx - cx as f64;
        offset[[1, cy, cx]] = my - cy as f64;
        center_cells.push((cy, cx));
    }
    EtdTargets {
        heat,
        size,
        offset,
        center_cells,
        n_entities: boxes.len(),
    }
}

// ---- losses -------------------------------------------------------------------

/// Penalty-reduced focal loss over all heatmap cells, normalized by the
/// number of peaks.
pub fn focal_loss(
    g: &mut Graph,
    heat_logits: Var,
    heatmap: Var,
    target: &Array2<f64>,
    alpha: i32,
    beta: i32,
    n_peaks: usize,
) -> Var {
    let (h, w) = target.dim();
    let mut pos = ArrayD::zeros(IxDyn(&[1, h, w]));
    let mut negw = ArrayD::zeros(IxDyn(&[1, h, w]));
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]];
            if t >= 1.0 {
                pos[[0, y, x]] = 1.0;
            } else {
                negw[[0, y, x]] = (1.0 - t).powi(beta);
            }
        }
    }
    let pos_mask = g.constant(pos);
    let neg_weight = g.constant(negw);
    // log p = -softplus(-z); log(1-p) = -softplus(z)
    let neg_z = g.affine(heat_logits, -1.0, 0.0);
    let log_p = g.softplus(neg_z);
    let log_p = g.affine(log_p, -1.0, 0.0);
    let log_1p = g.softplus(heat_logits);
    let log_1p = g.affine(log_1p, -1.0, 0.0);
    let one_minus_p = g.affine(heatmap, -1.0, 1.0);
    let omp_pow = g.powi(one_minus_p, alpha);
    let p_pow = g.powi(heatmap, alpha);
    let pos_term = g.mul(omp_pow, log_p);
    let pos_term = g.mul(pos_term, pos_mask);
    let neg_term = g.mul(p_pow, log_1p);
    let neg_term = g.mul(neg_term, neg_weight);
    let both = g.add(pos_term, neg_term);
    let total = g.sum_all(both);
    g.affine(total, -1.0 / n_peaks.max(1) as f64, 0.0)
}

/// L1 over channels at masked cells, averaged over the entity count.
pub fn masked_l1(
    g: &mut Graph,
    pred: Var,
    target: &Array3<f64>,
    cells: &[(usize, usize)],
    n_entities: usize,
) -> Var {
    let (c, h, w) = target.dim();
    let mut mask = ArrayD::zeros(IxDyn(&[c, h, w]));
    for &(cy, cx) in cells {
        for ci in 0..c {
            mask[[ci, cy, cx]] = 1.0;
        }
    }
    let t = g.constant(target.clone().into_dyn());
    let m = g.constant(mask);
    let diff = g.sub(pred, t);
    let ad = g.abs(diff);
    let masked = g.mul(ad, m);
    let s = g.sum_all(masked);
    g.affine(s, 1.0 / n_entities.max(1) as f64, 0.0)
}

pub struct EtdLoss {
    pub heat: Var,
    pub size: Var,
    pub offset: Var,
    pub total: Var,
}

/// Detection loss: focal heatmap + lambda_size * L1(size) + L1(offset).
pub fn loss_etd(
    g: &mut Graph,
    maps: &EtdMaps,
    targets: &EtdTargets,
    lambda_size: f64,
    cfg: &EtdConfig,
) -> EtdLoss {
    let heat = focal_loss(
        g,
        maps.heat_logits,
        maps.heatmap,
        &targets.heat,
        cfg.focal_alpha as i32,
        cfg.focal_beta as i32,
        targets.n_entities,
    );
    let size = masked_l1(
        g,
        maps.size,
        &targets.size,
        &targets.center_cells,
        targets.n_entities,
    );
    let offset = masked_l1(
        g,
        maps.offset,
        &targets.offset,
        &targets.center_cells,
        targets.n_entities,
    );
    let ls = g.affine(size, lambda_size, 0.0);
    let ho = g.add(heat, ls);
    let total = g.add(ho, offset);
    EtdLoss {
        heat,
        size,
        offset,
        total,
    }
}

// ---- decoding -----------------------------------------------------------------

/// Cells that are maxima of their 3x3 neighborhood (ties count as maxima).
pub fn local_maxima(heat: &Array2<f64>) -> Vec<(usize, usize)> {
    let (h, w) = heat.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heat[[y, x]];
            let mut is_max = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                        continue;
                    }
                    if heat[[ny as usize, nx as usize]] > v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                out.push((y, x));
            }
        }
    }
    out
}

/// Decode entity boxes from evaluated maps: 3x3 peak cells ranked by score,
/// `top_n` kept, threshold applied; box center `(cell + offset) * stride`,
/// size from the size map times stride.
pub fn decode_entities(
    heat: &Array2<f64>,
    size: &Array3<f64>,
    offset: &Array3<f64>,
    top_n: usize,
    score_threshold: f64,
) -> Vec<(Rect, f64)> {
    let mut peaks = local_maxima(heat);
    peaks.sort_by(|&(ya, xa), &(yb, xb)| {
        heat[[yb, xb]]
            .total_cmp(&heat[[ya, xa]])
            .then(ya.cmp(&yb))
            .then(xa.cmp(&xb))
    });
    peaks
        .into_iter()
        .take(top_n)
        .filter(|&(y, x)| heat[[y, x]] >= score_threshold)
        .map(|(y, x)| {
            let cx = (x as f64 + offset[[0, y, x]]) * ETD_STRIDE;
            let cy = (y as f64 + offset[[1, y, x]]) * ETD_STRIDE;
            let w = size[[0, y, x]] * ETD_STRIDE;
            let h = size[[1, y, x]] * ETD_STRIDE;
            (
                Rect::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
                heat[[y, x]],
            )
        })
        .collect()
}

// ---- word-to-entity relation head ----------------------------------------------

pub struct WtbOutput {
    /// Relation logits `[n_words, n_entities]`.
    pub logits: Var,
    pub word_reps: Var,
    pub entity_reps: Var,
}

pub struct WtbHead {
    pub word_branch: ConvHead,
    pub entity_branch: ConvHead,
    pub pair_proj: Linear,
}

impl WtbHead {
    pub fn new(
        store: &mut ParamStore,
        cfg: &crate::config::WtbConfig,
        rng: &mut impl Rng,
    ) -> Self {
        WtbHead {
            word_branch: ConvHead::new(
                store,
                "wtb.word",
                G_CHANNELS,
                cfg.head_channels,
                cfg.channels,
                rng,
            ),
            entity_branch: ConvHead::new(
                store,
                "wtb.entity",
                G_CHANNELS,
                cfg.head_channels,
                cfg.channels,
                rng,
            ),
            pair_proj: Linear::new(store, "wtb.pair_proj", cfg.channels, 1, rng),
        }
    }

    /// Representations gathered at word/entity centers; logits are the
    /// projected pairwise differences.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: &FusedFeature,
        word_centers: &[Point],
        entity_centers: &[Point],
    ) -> WtbOutput {
        let rep_word_map = self.word_branch.forward(g, store, fused.var);
        let rep_entity_map = self.entity_branch.forward(g, store, fused.var);
        let (n, m) = (word_centers.len(), entity_centers.len());
        let word_cells: Vec<(usize, usize)> = word_centers
            .iter()
            .map(|&p| point_to_cell(p, 8.0, fused.h, fused.w))
            .collect();
        let entity_cells: Vec<(usize, usize)> = entity_centers
            .iter()
            .map(|&p| point_to_cell(p, 8.0, fused.h, fused.w))
            .collect();
        let word_reps = g.gather_cells(rep_word_map, &word_cells);
        let entity_reps = g.gather_cells(rep_entity_map, &entity_cells);
        if n == 0 || m == 0 {
            let logits = g.constant(Arr::zeros(IxDyn(&[n, m])));
            return WtbOutput {
                logits,
                word_reps,
                entity_reps,
            };
        }
        let diffs = g.outer_diff(word_reps, entity_reps); // [n*m, c]
        let flat = self.pair_proj.forward(g, store, diffs); // [n*m, 1]
        let logits = g.reshape(flat, &[n, m]);
        WtbOutput {
            logits,
            word_reps,
            entity_reps,
        }
    }
}

/// Binary membership targets: 1 iff word center lies inside the entity box.
pub fn wtb_targets(word_centers: &[Point], entity_boxes: &[Rect]) -> Array2<f64> {
    Array2::from_shape_fn((word_centers.len(), entity_boxes.len()), |(i, j)| {
        if point_in_box(word_centers[i], &entity_boxes[j]) {
            1.0
        } else {
            0.0
        }
    })
}

// ---- inference-time assignment ---------------------------------------------------

/// One group of the output partition: words attached to a detected entity
/// box, or a singleton for an unassigned word.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignedGroup {
    /// Index into the detected entity list, or None for singletons.
    pub entity_index: Option<usize>,
    /// Member words ordered by spatial order.
    pub word_ids: Vec<usize>,
}

/// Assign each word to the entity box maximizing word-area-normalized
/// overlap, when that ratio reaches the threshold; leftovers become
/// singletons. Every word appears in exactly one group.
pub fn assign_words_to_entities(
    word_boxes: &[Rect],
    entity_boxes: &[Rect],
    iou_threshold: f64,
) -> Vec<AssignedGroup> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); entity_boxes.len()];
    let mut singletons: Vec<usize> = Vec::new();
    for (wi, wb) in word_boxes.iter().enumerate() {
        let area = wb.area();
        let mut best: Option<(usize, f64)> = None;
        for (ei, eb) in entity_boxes.iter().enumerate() {
            let ratio = if area > 0.0 {
                wb.intersection_area(eb) / area
            } else {
                0.0
            };
            let better = match best {
                None => true,
                Some((_, b)) => ratio > b,
            };
            if better {
                best = Some((ei, ratio));
            }
        }
        match best {
            Some((ei, ratio)) if ratio >= iou_threshold => members[ei].push(wi),
            _ => singletons.push(wi),
        }
    }
    let mut out = Vec::new();
    for (ei, mut ids) in members.into_iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let boxes: Vec<Rect> = ids.iter().map(|&w| word_boxes[w]).collect();
        let order = spatial_order(&boxes);
        ids = order.iter().map(|&k| ids[k]).collect();
        out.push(AssignedGroup {
            entity_index: Some(ei),
            word_ids: ids,
        });
    }
    for wi in singletons {
        out.push(AssignedGroup {
            entity_index: None,
            word_ids: vec![wi],
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::chargrid::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn fused_from(g: &mut Graph, arr: Arr, provenance: Provenance) -> FusedFeature {
        let shape = arr.shape().to_vec();
        let var = g.constant(arr);
        FusedFeature {
            var,
            h: shape[1],
            w: shape[2],
            provenance,
        }
    }

    #[test]
    fn etd_forward_doubles_resolution() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = EtdConfig {
            head_channels: 8,
            ..EtdConfig::default()
        };
        let head = EtdHead::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new(Mode::Inference);
        let fused = fused_from(
            &mut g,
            Arr::zeros(IxDyn(&[G_CHANNELS, 32, 32])),
            Provenance::GroundTruth,
        );
        let maps = head.forward(&mut g, &store, &fused);
        assert_eq!(g.value(maps.heatmap).shape(), &[1, 64, 64]);
        assert_eq!(g.value(maps.size).shape(), &[2, 64, 64]);
        assert_eq!(g.value(maps.offset).shape(), &[2, 64, 64]);
    }

    #[test]
    fn zero_init_final_convs_give_neutral_maps() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = EtdConfig {
            head_channels: 8,
            ..EtdConfig::default()
        };
        let head = EtdHead::new(&mut store, &cfg, &mut rng);
        for name in ["etd.heat.conv1", "etd.size.conv1", "etd.offset.conv1"] {
            for suffix in [".w", ".b"] {
                let id = store.find(&format!("{name}{suffix}")).unwrap();
                let z = Arr::zeros(store.get(id).raw_dim());
                store.set(id, z);
            }
        }
        let mut g = Graph::new(Mode::Inference);
        let fused = fused_from(
            &mut g,
            Arr::zeros(IxDyn(&[G_CHANNELS, 8, 8])),
            Provenance::GroundTruth,
        );
        let maps = head.forward(&mut g, &store, &fused);
        assert!(g.value(maps.heatmap).iter().all(|&v| v == 0.5));
        assert!(g.value(maps.size).iter().all(|&v| v == 1.0));
        assert!(g.value(maps.offset).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_rendering_center_offsets_and_peaks() {
        // entity centered exactly on a cell
        let b = Rect::new(36.0, 76.0, 44.0, 84.0); // center (40, 80) -> cell (20, 10), offset 0
        let t = render_etd_targets(&[b], 32, 32);
        assert_eq!(t.heat[[20, 10]], 1.0);
        assert_eq!(t.offset[[0, 20, 10]], 0.0);
        assert_eq!(t.offset[[1, 20, 10]], 0.0);
        // fractional center: map units (10.5, 20.25) -> cell (20, 10), offset (0.5, 0.25)
        let b2 = Rect::new(10.5 * 4.0 - 2.0, 20.25 * 4.0 - 2.0, 10.5 * 4.0 + 2.0, 20.25 * 4.0 + 2.0);
        let t2 = render_etd_targets(&[b2], 32, 32);
        assert_eq!(t2.offset[[0, 20, 10]], 0.5);
        assert_eq!(t2.offset[[1, 20, 10]], 0.25);
        assert_eq!(t2.size[[0, 20, 10]], 1.0);
        assert_eq!(t2.size[[1, 20, 10]], 1.0);
    }

    #[test]
    fn overlapping_gaussians_take_pointwise_max() {
        let a = Rect::new(0.0, 0.0, 64.0, 32.0);
        let b = Rect::new(16.0, 0.0, 80.0, 32.0);
        let both = render_etd_targets(&[a, b], 24, 24);
        let ta = render_etd_targets(&[a], 24, 24);
        let tb = render_etd_targets(&[b], 24, 24);
        for y in 0..24 {
            for x in 0..24 {
                let expect = ta.heat[[y, x]].max(tb.heat[[y, x]]);
                assert_eq!(both.heat[[y, x]], expect, "cell ({y},{x})");
            }
        }
    }

    #[test]
    fn decode_inverts_rendering_exactly() {
        let boxes = vec![
            Rect::new(32.0, 72.0, 48.0, 96.0), // center (40,84), w=16,h=24
        ];
        let t = render_etd_targets(&boxes, 32, 32);
        let decoded = decode_entities(&t.heat, &t.size, &t.offset, 10, 0.5);
        assert_eq!(decoded.len(), 1);
        let (r, score) = decoded[0];
        assert_eq!(score, 1.0);
        assert!((r.x0 - 32.0).abs() < 1e-9 && (r.y0 - 72.0).abs() < 1e-9);
        assert!((r.x1 - 48.0).abs() < 1e-9 && (r.y1 - 96.0).abs() < 1e-9);
    }

    #[test]
    fn flat_heatmap_decodes_to_nothing_above_threshold() {
        let heat = Array2::from_elem((16, 16), 0.2);
        let size = Array3::zeros((2, 16, 16));
        let offset = Array3::zeros((2, 16, 16));
        let out = decode_entities(&heat, &size, &offset, 5, 0.25);
        assert!(out.is_empty());
        let all = decode_entities(&heat, &size, &offset, 5, 0.1);
        assert_eq!(all.len(), 5, "top_n bounds the flat case deterministically");
    }

    #[test]
    fn local_maxima_matches_exhaustive_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let heat = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0));
            let got = local_maxima(&heat);
            let mut expect = Vec::new();
            for y in 0..16usize {
                for x in 0..16usize {
                    let mut ok = true;
                    for ny in y.saturating_sub(1)..=(y + 1).min(15) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(15) {
                            if (ny, nx) != (y, x) && heat[[ny, nx]] > heat[[y, x]] {
                                ok = false;
                            }
                        }
                    }
                    if ok {
                        expect.push((y, x));
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn eq3_combination_and_linearity() {
        // synthetic term values: check the lambda wiring at machine precision
        let mut g = Graph::new(Mode::Inference);
        let hv = g.scalar(1.0);
        let sv = g.scalar(2.0);
        let ov = g.scalar(0.5);
        let combine = |g: &mut Graph, h: Var, s: Var, o: Var, lambda: f64| {
            let ls = g.affine(s, lambda, 0.0);
            let a = g.add(h, ls);
            g.add(a, o)
        };
        let pre = combine(&mut g, hv, sv, ov, 0.2);
        assert!((g.scalar_value(pre) - 1.9).abs() < 1e-15);
        let fin = combine(&mut g, hv, sv, ov, 1.0);
        assert!((g.scalar_value(fin) - 3.5).abs() < 1e-15);
        let delta = g.scalar_value(fin) - g.scalar_value(pre);
        assert!((delta - 0.8 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_etd_is_zero_on_exact_predictions_for_size_offset() {
        let boxes = vec![Rect::new(8.0, 8.0, 40.0, 24.0), Rect::new(60.0, 60.0, 100.0, 90.0)];
        let t = render_etd_targets(&boxes, 32, 32);
        let mut g = Graph::new(Mode::Inference);
        let size_pred = g.constant(t.size.clone().into_dyn());
        let offset_pred = g.constant(t.offset.clone().into_dyn());
        let s = masked_l1(&mut g, size_pred, &t.size, &t.center_cells, t.n_entities);
        let o = masked_l1(&mut g, offset_pred, &t.offset, &t.center_cells, t.n_entities);
        assert_eq!(g.scalar_value(s), 0.0);
        assert_eq!(g.scalar_value(o), 0.0);
    }

    #[test]
    fn wtb_shapes_and_pairwise_difference_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = crate::config::WtbConfig {
            channels: 16,
            head_channels: 8,
        };
        let head = WtbHead::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new(Mode::Inference);
        let fmap = crate::autograd::normal_init(&mut rng, &[G_CHANNELS, 8, 8], 0.3);
        let fused = fused_from(&mut g, fmap, Provenance::GroundTruth);
        let words = vec![
            Point::new(12.0, 12.0),
            Point::new(40.0, 12.0),
            Point::new(20.0, 44.0),
        ];
        let ents = vec![Point::new(16.0, 12.0), Point::new(20.0, 44.0)];
        let out = head.forward(&mut g, &store, &fused, &words, &ents);
        assert_eq!(g.value(out.logits).shape(), &[3, 2]);
        // nested-loop oracle over the gathered representations
        let wr = g.value(out.word_reps).clone();
        let er = g.value(out.entity_reps).clone();
        let wproj = store.get(head.pair_proj.w);
        let bproj = store.get(head.pair_proj.b)[[0]];
        for i in 0..3 {
            for j in 0..2 {
                let mut dot = bproj;
                for c in 0..cfg.channels {
                    dot += (wr[[i, c]] - er[[j, c]]) * wproj[[c, 0]];
                }
                let got = g.value(out.logits)[[i, j]];
                assert!((got - dot).abs() < 1e-12, "({i},{j}): {got} vs {dot}");
            }
        }
    }

    #[test]
    fn wtb_identical_centers_with_shared_branches_give_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = crate::config::WtbConfig {
            channels: 16,
            head_channels: 8,
        };
        let mut head = WtbHead::new(&mut store, &cfg, &mut rng);
        // share branch parameters so Rep_word == Rep_entity
        head.entity_branch = head.word_branch.clone();
        // zero projection bias
        let z = Arr::zeros(store.get(head.pair_proj.b).raw_dim());
        store.set(head.pair_proj.b, z);
        let mut g = Graph::new(Mode::Inference);
        let fmap = crate::autograd::normal_init(&mut rng, &[G_CHANNELS, 8, 8], 0.3);
        let fused = fused_from(&mut g, fmap, Provenance::GroundTruth);
        let p = vec![Point::new(24.0, 24.0)];
        let out = head.forward(&mut g, &store, &fused, &p, &p);
        assert_eq!(g.value(out.logits)[[0, 0]], 0.0);
    }

    #[test]
    fn wtb_empty_sides_produce_empty_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = crate::config::WtbConfig {
            channels: 8,
            head_channels: 8,
        };
        let head = WtbHead::new(&mut store, &cfg, &mut rng);
        let mut g = Graph::new(Mode::Inference);
        let fused = fused_from(
            &mut g,
            Arr::zeros(IxDyn(&[G_CHANNELS, 4, 4])),
            Provenance::GroundTruth,
        );
        let out = head.forward(&mut g, &store, &fused, &[], &[Point::new(1.0, 1.0)]);
        assert_eq!(g.value(out.logits).shape(), &[0, 1]);
    }

    #[test]
    fn wtb_targets_match_brute_force_membership() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.gen_range(1..=50);
            let m = rng.gen_range(1..=20);
            let words: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)))
                .collect();
            let ents: Vec<Rect> = (0..m)
                .map(|_| {
                    let x0 = rng.gen_range(0.0..180.0);
                    let y0 = rng.gen_range(0.0..180.0);
                    Rect::new(x0, y0, x0 + rng.gen_range(5.0..40.0), y0 + rng.gen_range(5.0..40.0))
                })
                .collect();
            let t = wtb_targets(&words, &ents);
            for i in 0..n {
                for j in 0..m {
                    let expect = point_in_box(words[i], &ents[j]);
                    assert_eq!(t[[i, j]] == 1.0, expect);
                }
            }
        }
    }

    #[test]
    fn assignment_rules() {
        let words = vec![
            Rect::new(0.0, 0.0, 10.0, 10.0),   // fully in entity 0
            Rect::new(100.0, 100.0, 110.0, 110.0), // overlaps nothing
            Rect::new(18.0, 0.0, 28.0, 10.0),  // 0.6 in entity 1, 0.2 in entity 0
        ];
        let ents = vec![Rect::new(0.0, 0.0, 20.0, 12.0), Rect::new(22.0, 0.0, 40.0, 12.0)];
        let groups = assign_words_to_entities(&words, &ents, 0.4);
        assert!(groups.contains(&AssignedGroup {
            entity_index: Some(0),
            word_ids: vec![0]
        }));
        assert!(groups.contains(&AssignedGroup {
            entity_index: Some(1),
            word_ids: vec![2]
        }));
        assert!(groups.contains(&AssignedGroup {
            entity_index: None,
            word_ids: vec![1]
        }));
        // partition property
        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.word_ids.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn wtb_permutation_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = crate::config::WtbConfig {
            channels: 8,
            head_channels: 8,
        };
        let head = WtbHead::new(&mut store, &cfg, &mut rng);
        let fmap = crate::autograd::normal_init(&mut rng, &[G_CHANNELS, 8, 8], 0.3);
        let words = vec![
            Point::new(12.0, 12.0),
            Point::new(40.0, 12.0),
            Point::new(20.0, 44.0),
        ];
        let ents = vec![Point::new(16.0, 12.0), Point::new(52.0, 44.0)];
        let run = |ws: &[Point], es: &[Point]| {
            let mut g = Graph::new(Mode::Inference);
            let fused = fused_from(&mut g, fmap.clone(), Provenance::GroundTruth);
            let out = head.forward(&mut g, &store, &fused, ws, es);
            g.value(out.logits).clone()
        };
        let base = run(&words, &ents);
        let wperm = [2, 0, 1];
        let eperm = [1, 0];
        let words_p: Vec<Point> = wperm.iter().map(|&i| words[i]).collect();
        let ents_p: Vec<Point> = eperm.iter().map(|&j| ents[j]).collect();
        let permuted = run(&words_p, &ents_p);
        for (pi, &i) in wperm.iter().enumerate() {
            for (pj, &j) in eperm.iter().enumerate() {
                assert_eq!(permuted[[pi, pj]].to_bits(), base[[i, j]].to_bits());
            }
        }
    }
}
