//! Synthetic form-like documents with full character/word/line/entity
//! annotations, plus the pre-training pseudo-labels derived from layout
//! (colon splits, indentation merges, reading order).
//!
//! Pages are rendered from a fixed 5x7 bitmap glyph alphabet. Character
//! boxes tile their word box exactly: each character cell is six glyph
//! columns wide (five for ink plus one of tracking) and seven rows tall,
//! scaled by `glyph_scale`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::doc::{CharBox, Document, Entity, Line, Word};
use crate::geom::{spatial_order, Point, Rect};
use crate::{Error, Result};

/// 5x7 glyph rows, one bit per column (MSB = leftmost of the 5).
type Glyph = [u8; 7];

const fn g(rows: [&str; 7]) -> Glyph {
    let mut out = [0u8; 7];
    let mut r = 0;
    while r < 7 {
        let row = rows[r].as_bytes();
        let mut bits = 0u8;
        let mut c = 0;
        while c < 5 {
            bits <<= 1;
            if row[c] == b'#' {
                bits |= 1;
            }
            c += 1;
        }
        out[r] = bits;
        r += 1;
    }
    out
}

#[rustfmt::skip]
const GLYPHS: [(char, Glyph); 37] = [
    ('a', g([".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"])),
    ('b', g(["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."])),
    ('c', g([".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."])),
    ('d', g(["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."])),
    ('e', g(["#####", "#....", "#....", "####.", "#....", "#....", "#####"])),
    ('f', g(["#####", "#....", "#....", "####.", "#....", "#....", "#...."])),
    ('g', g([".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."])),
    ('h', g(["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"])),
    ('i', g([".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."])),
    ('j', g(["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."])),
    ('k', g(["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"])),
    ('l', g(["#....", "#....", "#....", "#....", "#....", "#....", "#####"])),
    ('m', g(["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"])),
    ('n', g(["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"])),
    ('o', g([".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."])),
    ('p', g(["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."])),
    ('q', g([".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"])),
    ('r', g(["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"])),
    ('s', g([".####", "#....", "#....", ".###.", "....#", "....#", "####."])),
    ('t', g(["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."])),
    ('u', g(["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."])),
    ('v', g(["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."])),
    ('w', g(["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"])),
    ('x', g(["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"])),
    ('y', g(["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."])),
    ('z', g(["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"])),
    ('0', g([".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."])),
    ('1', g(["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."])),
    ('2', g([".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"])),
    ('3', g(["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."])),
    ('4', g(["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."])),
    ('5', g(["#####", "#....", "####.", "....#", "....#", "#...#", ".###."])),
    ('6', g(["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."])),
    ('7', g(["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."])),
    ('8', g([".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."])),
    ('9', g([".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."])),
    (':', g([".....", "..#..", "..#..", ".....", "..#..", "..#..", "....."])),
];

/// Bitmap rows of a glyph, if the renderer can draw it.
pub fn glyph_bitmap(c: char) -> Option<&'static Glyph> {
    GLYPHS.iter().find(|(gc, _)| *gc == c).map(|(_, g)| g)
}

/// Glyph cell geometry: each character cell is `6*scale` wide, `7*scale`
/// tall; ink is drawn in the leftmost `5*scale` columns.
pub const CELL_COLS: usize = 6;
pub const CELL_ROWS: usize = 7;

/// Generation parameters for one synthetic page.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub width: usize,
    pub height: usize,
    pub n_headers: usize,
    pub n_key_value_pairs: usize,
    pub n_noise_words: usize,
    pub glyph_scale: usize,
    pub margin: usize,
    pub line_gap: usize,
    /// Indentation of below-key values, in character cells.
    pub indent_cells: usize,
    /// Probability that a key ends with ':'.
    pub colon_prob: f64,
    /// Probability that a value goes below its key instead of to its right.
    pub below_prob: f64,
    /// Probability that a below-value continues on a second, further
    /// indented line.
    pub continuation_prob: f64,
    pub key_word_len: [usize; 2],
    pub value_word_len: [usize; 2],
    pub value_words: [usize; 2],
    pub categories: Vec<String>,
    /// Stddev of additive Gaussian pixel noise (0 disables).
    pub noise_sigma: f64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            width: 128,
            height: 128,
            n_headers: 1,
            n_key_value_pairs: 2,
            n_noise_words: 1,
            glyph_scale: 2,
            margin: 6,
            line_gap: 6,
            indent_cells: 2,
            colon_prob: 0.95,
            below_prob: 0.35,
            continuation_prob: 0.15,
            key_word_len: [2, 4],
            value_word_len: [1, 3],
            value_words: [1, 2],
            categories: vec![
                "header".into(),
                "key".into(),
                "value".into(),
                "other".into(),
            ],
            noise_sigma: 0.0,
        }
    }
}

struct PlacedWord {
    chars: Vec<CharBox>,
    row: usize, // y0 in pixels, used to group lines
}

struct PageBuilder<'a> {
    spec: &'a LayoutSpec,
    image: Array2<f64>,
    words: Vec<PlacedWord>,
    entities: Vec<(Vec<usize>, String)>,
    cursor_y: usize,
}

impl<'a> PageBuilder<'a> {
    fn new(spec: &'a LayoutSpec) -> Self {
        PageBuilder {
            spec,
            image: Array2::from_elem((spec.height, spec.width), 1.0),
            words: Vec::new(),
            entities: Vec::new(),
            cursor_y: spec.margin,
        }
    }

    fn cell_w(&self) -> usize {
        CELL_COLS * self.spec.glyph_scale
    }

    fn cell_h(&self) -> usize {
        CELL_ROWS * self.spec.glyph_scale
    }

    fn line_fits(&self) -> bool {
        self.cursor_y + self.cell_h() + self.spec.margin <= self.spec.height
    }

    fn advance_line(&mut self) {
        self.cursor_y += self.cell_h() + self.spec.line_gap;
    }

    /// Draw a word at `(x, y)`; returns its word index.
    fn place_word(&mut self, text: &str, x: usize, y: usize) -> usize {
        let s = self.spec.glyph_scale;
        let mut chars = Vec::with_capacity(text.chars().count());
        for (k, ch) in text.chars().enumerate() {
            let cx = x + k * self.cell_w();
            let glyph = glyph_bitmap(ch).expect("generator only emits drawable glyphs");
            for (r, bits) in glyph.iter().enumerate() {
                for c in 0..5 {
                    if bits & (1 << (4 - c)) != 0 {
                        for dy in 0..s {
                            for dx in 0..s {
                                self.image[[y + r * s + dy, cx + c * s + dx]] = 0.0;
                            }
                        }
                    }
                }
            }
            chars.push(CharBox {
                ch,
                rect: Rect::new(
                    cx as f64,
                    y as f64,
                    (cx + self.cell_w()) as f64,
                    (y + self.cell_h()) as f64,
                ),
            });
        }
        self.words.push(PlacedWord { chars, row: y });
        self.words.len() - 1
    }

    fn width_of(&self, text: &str) -> usize {
        text.chars().count() * self.cell_w()
    }
}

fn random_word(rng: &mut ChaCha12Rng, len_range: [usize; 2]) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let len = rng.gen_range(len_range[0]..=len_range[1]);
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

/// Render one synthetic page. Deterministic per seed; retries with fewer
/// elements on overflow before giving up.
pub fn generate_document(spec: &LayoutSpec, seed: u64) -> Result<Document> {
    let mut attempt_spec = spec.clone();
    for _ in 0..4 {
        match try_generate(&attempt_spec, seed) {
            Ok(doc) => return Ok(doc),
            Err(Error::LayoutOverflow) => {
                if attempt_spec.n_key_value_pairs > 1 {
                    attempt_spec.n_key_value_pairs -= 1;
                } else if attempt_spec.n_noise_words > 0 {
                    attempt_spec.n_noise_words -= 1;
                } else if attempt_spec.n_headers > 0 {
                    attempt_spec.n_headers -= 1;
                } else {
                    return Err(Error::LayoutOverflow);
                }
            }
            Err(e) => return Err(e),
        }
    }
    try_generate(&attempt_spec, seed)
}

fn try_generate(spec: &LayoutSpec, seed: u64) -> Result<Document> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut page = PageBuilder::new(spec);
    let cell_w = page.cell_w();
    let usable_x1 = spec.width.saturating_sub(spec.margin);

    for _ in 0..spec.n_headers {
        if !page.line_fits() {
            return Err(Error::LayoutOverflow);
        }
        let text = random_word(&mut rng, spec.key_word_len);
        let x = spec.margin + rng.gen_range(0..=cell_w);
        if x + page.width_of(&text) > usable_x1 {
            return Err(Error::LayoutOverflow);
        }
        let y = page.cursor_y;
        let wid = page.place_word(&text, x, y);
        page.entities.push((vec![wid], "header".into()));
        page.advance_line();
    }

    for _ in 0..spec.n_key_value_pairs {
        if !page.line_fits() {
            return Err(Error::LayoutOverflow);
        }
        let mut key_text = random_word(&mut rng, spec.key_word_len);
        if rng.gen_bool(spec.colon_prob) {
            key_text.push(':');
        }
        let n_value_words = rng.gen_range(spec.value_words[0]..=spec.value_words[1]);
        let value_texts: Vec<String> = (0..n_value_words)
            .map(|_| random_word(&mut rng, spec.value_word_len))
            .collect();
        let key_x = spec.margin;
        let key_w = page.width_of(&key_text);
        let value_w: usize =
            value_texts.iter().map(|t| page.width_of(t)).sum::<usize>()
                + (n_value_words - 1) * cell_w;
        let same_line_end = key_x + key_w + cell_w + value_w;
        let below = rng.gen_bool(spec.below_prob) || same_line_end > usable_x1;

        let y = page.cursor_y;
        let key_id = page.place_word(&key_text, key_x, y);
        page.entities.push((vec![key_id], "key".into()));

        let mut value_ids = Vec::new();
        if below {
            page.advance_line();
            if !page.line_fits() {
                return Err(Error::LayoutOverflow);
            }
            let vx = spec.margin + spec.indent_cells * cell_w;
            let continuation = n_value_words > 1 && rng.gen_bool(spec.continuation_prob);
            let mut x = vx;
            let y2 = page.cursor_y;
            let split_at = if continuation { n_value_words / 2 } else { n_value_words };
            for t in &value_texts[..split_at] {
                if x + page.width_of(t) > usable_x1 {
                    return Err(Error::LayoutOverflow);
                }
                value_ids.push(page.place_word(t, x, y2));
                x += page.width_of(t) + cell_w;
            }
            if continuation {
                page.advance_line();
                if !page.line_fits() {
                    return Err(Error::LayoutOverflow);
                }
                let mut x = vx + 2 * cell_w;
                let y3 = page.cursor_y;
                for t in &value_texts[split_at..] {
                    if x + page.width_of(t) > usable_x1 {
                        return Err(Error::LayoutOverflow);
                    }
                    value_ids.push(page.place_word(t, x, y3));
                    x += page.width_of(t) + cell_w;
                }
            }
        } else {
            let mut x = key_x + key_w + cell_w + rng.gen_range(0..=cell_w / 2);
            for t in &value_texts {
                if x + page.width_of(t) > usable_x1 {
                    return Err(Error::LayoutOverflow);
                }
                value_ids.push(page.place_word(t, x, y));
                x += page.width_of(t) + cell_w;
            }
        }
        page.entities.push((value_ids, "value".into()));
        page.advance_line();
    }

    for _ in 0..spec.n_noise_words {
        if !page.line_fits() {
            return Err(Error::LayoutOverflow);
        }
        let text = random_word(&mut rng, spec.value_word_len);
        // jitter stays within one glyph cell so a noise word never looks
        // like an indented continuation of the line above
        let x = spec.margin + rng.gen_range(0..=cell_w);
        if x + page.width_of(&text) > usable_x1 {
            return Err(Error::LayoutOverflow);
        }
        let y = page.cursor_y;
        let wid = page.place_word(&text, x, y);
        page.entities.push((vec![wid], "other".into()));
        page.advance_line();
    }

    if spec.noise_sigma > 0.0 {
        for p in page.image.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *p = (*p + spec.noise_sigma * z).clamp(0.0, 1.0);
        }
    }

    // Assemble words, lines by shared row, entities.
    let words: Vec<Word> = page
        .words
        .iter()
        .map(|pw| Word::from_chars(pw.chars.clone()))
        .collect::<Result<_>>()?;
    let mut rows: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (wi, pw) in page.words.iter().enumerate() {
        rows.entry(pw.row).or_default().push(wi);
    }
    let lines: Vec<Line> = rows
        .into_values()
        .map(|mut ids| {
            ids.sort_by(|&a, &b| words[a].rect.x0.total_cmp(&words[b].rect.x0));
            let rect = ids
                .iter()
                .skip(1)
                .fold(words[ids[0]].rect, |acc, &w| acc.union(&words[w].rect));
            Line { word_ids: ids, rect }
        })
        .collect();
    let entities: Vec<Entity> = page
        .entities
        .iter()
        .map(|(ids, category)| {
            let rect = ids
                .iter()
                .skip(1)
                .fold(words[ids[0]].rect, |acc, &w| acc.union(&words[w].rect));
            let centers: Vec<Point> = ids.iter().map(|&w| words[w].center).collect();
            Ok(Entity {
                word_ids: ids.clone(),
                category: category.clone(),
                rect,
                point: crate::doc::entity_point(&centers)?,
            })
        })
        .collect::<Result<_>>()?;
    let doc = Document {
        image: page.image,
        width: spec.width,
        height: spec.height,
        words,
        lines,
        entities,
    };
    doc.validate()?;
    Ok(doc)
}

// ---- pre-training pseudo-labels ---------------------------------------------

/// Heuristic entity boundaries from content and layout: lines split after
/// colon-terminated words; an indented, vertically adjacent line merges into
/// the previous line's open (non-colon-terminated) block. Merging applies
/// only between whole single-segment lines, which keeps group boxes
/// pairwise disjoint.
pub fn pseudo_entity_boundaries(doc: &Document) -> Vec<Vec<usize>> {
    let mut char_widths: Vec<f64> = doc
        .words
        .iter()
        .flat_map(|w| w.chars.iter().map(|c| c.rect.width()))
        .collect();
    char_widths.sort_by(f64::total_cmp);
    let glyph_w = char_widths.get(char_widths.len() / 2).copied().unwrap_or(0.0);

    let line_boxes: Vec<Rect> = doc.lines.iter().map(|l| l.rect).collect();
    let order = spatial_order(&line_boxes);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut prev_line: Option<usize> = None;
    let mut prev_single_open = false;

    for &li in &order {
        let line = &doc.lines[li];
        // split after any colon-terminated word
        let mut segments: Vec<Vec<usize>> = vec![Vec::new()];
        for &wid in &line.word_ids {
            segments.last_mut().unwrap().push(wid);
            if doc.words[wid].text.ends_with(':') {
                segments.push(Vec::new());
            }
        }
        segments.retain(|s| !s.is_empty());
        if segments.is_empty() {
            continue;
        }
        let mergeable = if let Some(pl) = prev_line {
            let prev = &doc.lines[pl];
            prev_single_open
                && segments.len() == 1
                && line.rect.x0 - prev.rect.x0 > glyph_w
                && line.rect.y0 - prev.rect.y1 < 1.5 * prev.rect.height()
        } else {
            false
        };
        let single = segments.len() == 1;
        let mut seg_iter = segments.into_iter();
        let first = seg_iter.next().unwrap();
        if mergeable {
            groups.last_mut().expect("merge target exists").extend(first);
        } else {
            groups.push(first);
        }
        for seg in seg_iter {
            groups.push(seg);
        }
        prev_line = Some(li);
        let last_closed = groups
            .last()
            .and_then(|grp| grp.last())
            .map(|&w| doc.words[w].text.ends_with(':'))
            .unwrap_or(true);
        prev_single_open = single && !last_closed;
    }
    groups
}

/// Union box per pseudo group.
pub fn pseudo_boundary_boxes(doc: &Document, groups: &[Vec<usize>]) -> Vec<Rect> {
    groups
        .iter()
        .map(|ids| {
            ids.iter()
                .skip(1)
                .fold(doc.words[ids[0]].rect, |acc, &w| acc.union(&doc.words[w].rect))
        })
        .collect()
}

/// Line-level reading order: top to bottom, left to right.
pub fn pseudo_reading_order(lines: &[Rect]) -> Vec<usize> {
    spatial_order(lines)
}

/// Fraction of true entities whose exact word set appears among the pseudo
/// groups.
pub fn pseudo_boundary_recovery(doc: &Document) -> (usize, usize) {
    let groups = pseudo_entity_boundaries(doc);
    let sets: std::collections::HashSet<Vec<usize>> = groups
        .into_iter()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    let mut hit = 0;
    for ent in &doc.entities {
        let mut ids = ent.word_ids.clone();
        ids.sort_unstable();
        if sets.contains(&ids) {
            hit += 1;
        }
    }
    (hit, doc.entities.len())
}

// ---- corpus ------------------------------------------------------------------

/// Manifest written next to a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: LayoutSpec,
    pub base_seed: u64,
    pub count: usize,
    pub category_counts: std::collections::BTreeMap<String, usize>,
    pub files: Vec<String>,
}

/// Generate `count` documents with seeds `base_seed..base_seed+count`.
pub fn generate_corpus(spec: &LayoutSpec, count: usize, base_seed: u64) -> Result<Vec<Document>> {
    (0..count)
        .map(|i| generate_document(spec, base_seed + i as u64))
        .collect()
}

/// Write images + annotations + manifest to a directory.
pub fn write_corpus(
    spec: &LayoutSpec,
    count: usize,
    base_seed: u64,
    out: &std::path::Path,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(out)?;
    let mut category_counts: std::collections::BTreeMap<String, usize> = Default::default();
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let doc = generate_document(spec, base_seed + i as u64)?;
        for e in &doc.entities {
            *category_counts.entry(e.category.clone()).or_insert(0) += 1;
        }
        let stem = format!("doc_{i:05}");
        crate::doc::save_gray_image(&out.join(format!("{stem}.png")), &doc.image)?;
        let ann = doc.to_annotation();
        std::fs::write(
            out.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&ann)?,
        )?;
        files.push(stem);
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        base_seed,
        count,
        category_counts,
        files,
    };
    std::fs::write(
        out.join("corpus.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
