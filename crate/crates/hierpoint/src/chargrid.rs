//! Character grid: rasterize text+boxes into a per-pixel embedding image,
//! encode it with a patch transformer, and fuse with the backbone feature F.
//!
//! Every pixel of the grid carries the 3-d embedding of the character whose
//! box covers it ([PAD] for background). Overlapping boxes resolve
//! last-writer-wins in input order.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::autograd::{Arr, Graph, ParamStore, Var};
use crate::config::{GridConfig, UpsampleKind};
use crate::doc::CharBox;
use crate::geom::Rect;
use crate::nn::{Conv2d, Embedding, Linear, TransformerEncoder};
use crate::vocab::{Vocab, PAD};
use crate::{Error, Result};

/// Rasterized character-id grid; pair it with the learned embedding table to
/// obtain the `h x w x 3` float grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CharGrid {
    pub ids: Array2<usize>,
}

impl CharGrid {
    pub fn height(&self) -> usize {
        self.ids.dim().0
    }

    pub fn width(&self) -> usize {
        self.ids.dim().1
    }

    /// Expand to the float grid `[h, w, 3]` under an embedding table.
    pub fn materialize(&self, embed: &Arr) -> Array3<f64> {
        let (h, w) = self.ids.dim();
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| embed[[self.ids[[y, x]], c]])
    }
}

/// Who produced the text/boxes behind a fused feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Predicted,
}

/// The fused feature G at stride 8 with 256 channels, stored `[256, h, w]`.
pub struct FusedFeature {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub provenance: Provenance,
}

/// Fill a `h x w` id grid from character boxes; later boxes overwrite
/// earlier ones. Boxes are clamped to the image; characters must be in the
/// vocabulary.
pub fn rasterize_chargrid(
    chars: &[CharBox],
    vocab: &Vocab,
    height: usize,
    width: usize,
) -> Result<CharGrid> {
    let mut ids = Array2::from_elem((height, width), PAD);
    for cb in chars {
        let id = vocab.id_of(cb.ch)?;
        let r = cb.rect.clamp_to(width as f64, height as f64);
        if !r.is_valid() {
            continue;
        }
        let y_range = (r.y0.ceil() as usize)..(r.y1.ceil() as usize).min(height);
        let x_range = (r.x0.ceil() as usize)..(r.x1.ceil() as usize).min(width);
        for y in y_range {
            for x in x_range.clone() {
                ids[[y, x]] = id;
            }
        }
    }
    Ok(CharGrid { ids })
}

/// Patch transformer over the chargrid plus fusion with F.
pub struct GridEncoder {
    pub cfg: GridConfig,
    pub char_embed: Embedding,
    pub patch_embed: Linear,
    pub encoder: TransformerEncoder,
    /// 1x1 projection of upsampled grid features into F's channel space.
    pub fuse_to_f: Conv2d,
    /// 1x1 projection of the summed features to the 256-channel G.
    pub fuse_out: Conv2d,
    pub f_channels: usize,
}

pub const G_CHANNELS: usize = 256;

impl GridEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &GridConfig,
        vocab_size: usize,
        f_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        GridEncoder {
            cfg: cfg.clone(),
            char_embed: Embedding::new(store, "grid.char_embed", vocab_size, 3, 0.5, rng),
            patch_embed: Linear::new(store, "grid.patch_embed", patch_dim, cfg.hidden, rng),
            encoder: TransformerEncoder::new(
                store,
                "grid.encoder",
                cfg.layers,
                cfg.hidden,
                cfg.heads,
                cfg.mlp,
                rng,
            ),
            fuse_to_f: Conv2d::new(store, "grid.fuse_to_f", cfg.hidden, f_channels, 1, 1, 0, rng),
            fuse_out: Conv2d::new(store, "grid.fuse_out", f_channels, G_CHANNELS, 1, 1, 0, rng),
            f_channels,
        }
    }

    /// Encode the grid, upsample x4, and fuse with F (`[c_f, h/8, w/8]`) into
    /// G (`[256, h/8, w/8]`).
    pub fn encode_grid(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        grid: &CharGrid,
        f: Var,
        provenance: Provenance,
    ) -> Result<FusedFeature> {
        let (h, w) = grid.ids.dim();
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (hp, wp) = (h / p, w / p);
        let n_patches = hp * wp;
        // patch-ordered pixel ids
        let mut flat_ids = Vec::with_capacity(h * w);
        for py in 0..hp {
            for px in 0..wp {
                for dy in 0..p {
                    for dx in 0..p {
                        flat_ids.push(grid.ids[[py * p + dy, px * p + dx]]);
                    }
                }
            }
        }
        let embedded = self.char_embed.forward(g, store, &flat_ids); // [h*w, 3]
        let tokens = g.reshape(embedded, &[n_patches, p * p * 3]);
        let projected = self.patch_embed.forward(g, store, tokens); // [np, hidden]
        let pos = g.constant(patch_position_encoding(hp, wp, self.cfg.hidden));
        let with_pos = g.add(projected, pos);
        let encoded = self.encoder.forward(g, store, with_pos); // [np, hidden]
        let tr = g.transpose2(encoded); // [hidden, np]
        let map = g.reshape(tr, &[self.cfg.hidden, hp, wp]);
        let upsampled = match self.cfg.upsample {
            UpsampleKind::Bilinear => g.upsample_bilinear(map, 4),
            UpsampleKind::Nearest => g.upsample_nearest(map, 4),
        };
        let up_shape = g.value(upsampled).shape().to_vec();
        let f_shape = g.value(f).shape().to_vec();
        if up_shape[1..] != f_shape[1..] || f_shape[0] != self.f_channels {
            return Err(Error::ShapeMismatch(format!(
                "upsampled grid features {up_shape:?} vs F {f_shape:?} (expected F channels {})",
                self.f_channels
            )));
        }
        let grid_in_f = self.fuse_to_f.forward(g, store, upsampled);
        let summed = g.add(grid_in_f, f);
        let fused = self.fuse_out.forward(g, store, summed);
        Ok(FusedFeature {
            var: fused,
            h: up_shape[1],
            w: up_shape[2],
            provenance,
        })
    }
}

/// Fixed 2-d sinusoidal position encoding for patch tokens: the first half
/// of the channels encodes the patch row, the second half the column.
pub fn patch_position_encoding(hp: usize, wp: usize, dim: usize) -> Arr {
    let half = dim / 2;
    let mut pe = ArrayD::<f64>::zeros(IxDyn(&[hp * wp, dim]));
    for py in 0..hp {
        for px in 0..wp {
            let t = py * wp + px;
            for i in 0..half / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                pe[[t, 2 * i]] = (py as f64 * freq).sin();
                pe[[t, 2 * i + 1]] = (py as f64 * freq).cos();
                pe[[t, half + 2 * i]] = (px as f64 * freq).sin();
                pe[[t, half + 2 * i + 1]] = (px as f64 * freq).cos();
            }
        }
    }
    pe
}

/// Map image-space points to the cells of a strided map whose centers are
/// nearest, clamped to bounds, and gather the per-cell feature vectors.
/// Row order matches input order.
pub fn sample_center_features(
    g: &mut Graph,
    feature: Var,
    points: &[crate::geom::Point],
    stride: f64,
) -> Var {
    let shape = g.value(feature).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let cells: Vec<(usize, usize)> = points
        .iter()
        .map(|p| {
            let cx = ((p.x / stride - 0.5).round().max(0.0) as usize).min(w.saturating_sub(1));
            let cy = ((p.y / stride - 0.5).round().max(0.0) as usize).min(h.saturating_sub(1));
            (cy, cx)
        })
        .collect();
    g.gather_cells(feature, &cells)
}

/// The integer cell a point maps to under [`sample_center_features`].
pub fn point_to_cell(p: crate::geom::Point, stride: f64, h: usize, w: usize) -> (usize, usize) {
    let cx = ((p.x / stride - 0.5).round().max(0.0) as usize).min(w.saturating_sub(1));
    let cy = ((p.y / stride - 0.5).round().max(0.0) as usize).min(h.saturating_sub(1));
    (cy, cx)
}
