//! Document model: characters, words, lines, and entities over a grayscale
//! page image, plus the on-disk annotation schema.
//!
//! The annotation JSON is the only persisted format:
//!
//! ```json
//! {
//!   "width": 128, "height": 128,
//!   "words": [{"text": "ab", "box": [x0,y0,x1,y1],
//!              "chars": [{"c": "a", "box": [..]}, ...], "line_id": 0}],
//!   "entities": [{"word_ids": [0,1], "category": "key", "box": [..]}]
//! }
//! ```
//!
//! Loaders re-validate every structural invariant on read.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geom::{point_in_box, Point, Rect};
use crate::{Error, Result};

/// A single character with its box.
#[derive(Debug, Clone)]
pub struct CharBox {
    pub ch: char,
    pub rect: Rect,
}

/// A word: ordered characters, concatenated text, tight box, center point.
#[derive(Debug, Clone)]
pub struct Word {
    pub chars: Vec<CharBox>,
    pub text: String,
    pub rect: Rect,
    pub center: Point,
}

impl Word {
    /// Build a word from its characters; the box is the tight union and the
    /// center is the box midpoint.
    pub fn from_chars(chars: Vec<CharBox>) -> Result<Word> {
        if chars.is_empty() {
            return Err(Error::InvalidDocument("word with no characters".into()));
        }
        let mut rect = chars[0].rect;
        for c in &chars[1..] {
            rect = rect.union(&c.rect);
        }
        let text: String = chars.iter().map(|c| c.ch).collect();
        Ok(Word {
            center: rect.center(),
            text,
            rect,
            chars,
        })
    }
}

/// A group of words forming one semantic unit with a category label.
#[derive(Debug, Clone)]
pub struct Entity {
    pub word_ids: Vec<usize>,
    pub category: String,
    pub rect: Rect,
    pub point: Point,
}

/// A text line; member words are sorted left to right.
#[derive(Debug, Clone)]
pub struct Line {
    pub word_ids: Vec<usize>,
    pub rect: Rect,
}

/// A page: grayscale image in `[0,1]` plus the word/line/entity hierarchy.
#[derive(Debug, Clone)]
pub struct Document {
    pub image: Array2<f64>,
    pub width: usize,
    pub height: usize,
    pub words: Vec<Word>,
    pub lines: Vec<Line>,
    pub entities: Vec<Entity>,
}

/// Coordinate-wise arithmetic mean of word centers: the entity-level point.
pub fn entity_point(word_centers: &[Point]) -> Result<Point> {
    if word_centers.is_empty() {
        return Err(Error::EmptyEntity);
    }
    let n = word_centers.len() as f64;
    let sx: f64 = word_centers.iter().map(|p| p.x).sum();
    let sy: f64 = word_centers.iter().map(|p| p.y).sum();
    Ok(Point::new(sx / n, sy / n))
}

impl Document {
    /// Check every structural invariant; returns the first violation found.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image.dim();
        if h != self.height || w != self.width {
            return Err(Error::InvalidDocument(format!(
                "image shape {h}x{w} does not match declared {}x{}",
                self.height, self.width
            )));
        }
        if self.image.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidDocument("pixel outside [0,1]".into()));
        }
        let bounds = Rect::new(0.0, 0.0, self.width as f64, self.height as f64);
        for (wi, word) in self.words.iter().enumerate() {
            if word.chars.len() != word.text.chars().count() {
                return Err(Error::InvalidDocument(format!(
                    "word {wi}: text length differs from char count"
                )));
            }
            if !word.rect.is_valid() {
                return Err(Error::InvalidDocument(format!("word {wi}: invalid box")));
            }
            for c in &word.chars {
                if !c.rect.is_valid() {
                    return Err(Error::InvalidDocument(format!(
                        "word {wi}: invalid char box"
                    )));
                }
                if c.rect.x0 < bounds.x0
                    || c.rect.y0 < bounds.y0
                    || c.rect.x1 > bounds.x1
                    || c.rect.y1 > bounds.y1
                {
                    return Err(Error::InvalidDocument(format!(
                        "word {wi}: char box outside image bounds"
                    )));
                }
            }
            if !point_in_box(word.center, &word.rect) {
                return Err(Error::InvalidDocument(format!(
                    "word {wi}: center not inside box"
                )));
            }
            let mid = word.rect.center();
            if (word.center.x - mid.x).abs() > 1e-9 || (word.center.y - mid.y).abs() > 1e-9 {
                return Err(Error::InvalidDocument(format!(
                    "word {wi}: center is not the box midpoint"
                )));
            }
        }
        // every word in exactly one line
        let mut line_of = vec![usize::MAX; self.words.len()];
        for (li, line) in self.lines.iter().enumerate() {
            if line.word_ids.is_empty() {
                return Err(Error::InvalidDocument(format!("line {li}: empty")));
            }
            for win in line.word_ids.windows(2) {
                if self.words[win[0]].rect.x0 > self.words[win[1]].rect.x0 {
                    return Err(Error::InvalidDocument(format!(
                        "line {li}: words not sorted by x0"
                    )));
                }
            }
            for &wid in &line.word_ids {
                if wid >= self.words.len() {
                    return Err(Error::InvalidDocument(format!(
                        "line {li}: word id {wid} out of range"
                    )));
                }
                if line_of[wid] != usize::MAX {
                    return Err(Error::InvalidDocument(format!(
                        "word {wid} appears in two lines"
                    )));
                }
                line_of[wid] = li;
            }
        }
        if let Some(orphan) = line_of.iter().position(|&l| l == usize::MAX) {
            return Err(Error::InvalidDocument(format!(
                "word {orphan} belongs to no line"
            )));
        }
        // entities: disjoint word sets, point = mean of centers, centers inside box
        let mut entity_of = vec![usize::MAX; self.words.len()];
        for (ei, ent) in self.entities.iter().enumerate() {
            if ent.word_ids.is_empty() {
                return Err(Error::EmptyEntity);
            }
            for &wid in &ent.word_ids {
                if wid >= self.words.len() {
                    return Err(Error::InvalidDocument(format!(
                        "entity {ei}: word id {wid} out of range"
                    )));
                }
                if entity_of[wid] != usize::MAX {
                    return Err(Error::InvalidDocument(format!(
                        "word {wid} claimed by two entities"
                    )));
                }
                entity_of[wid] = ei;
                if !point_in_box(self.words[wid].center, &ent.rect) {
                    return Err(Error::InvalidDocument(format!(
                        "entity {ei}: member word center outside entity box"
                    )));
                }
            }
            let centers: Vec<Point> = ent.word_ids.iter().map(|&w| self.words[w].center).collect();
            let p = entity_point(&centers)?;
            if (p.x - ent.point.x).abs() > 1e-9 || (p.y - ent.point.y).abs() > 1e-9 {
                return Err(Error::InvalidDocument(format!(
                    "entity {ei}: point is not the mean of word centers"
                )));
            }
        }
        Ok(())
    }

    /// Line id for each word.
    pub fn line_of_word(&self) -> Vec<usize> {
        let mut line_of = vec![0usize; self.words.len()];
        for (li, line) in self.lines.iter().enumerate() {
            for &wid in &line.word_ids {
                line_of[wid] = li;
            }
        }
        line_of
    }

    /// Ground-truth content string of an entity: member word texts joined by
    /// single spaces in stored order.
    pub fn entity_content(&self, ent: &Entity) -> String {
        ent.word_ids
            .iter()
            .map(|&w| self.words[w].text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_annotation(&self) -> Annotation {
        let line_of = self.line_of_word();
        Annotation {
            width: self.width as u32,
            height: self.height as u32,
            words: self
                .words
                .iter()
                .enumerate()
                .map(|(wi, w)| WordAnnotation {
                    text: w.text.clone(),
                    bbox: w.rect.as_array(),
                    chars: w
                        .chars
                        .iter()
                        .map(|c| CharAnnotation {
                            c: c.ch.to_string(),
                            bbox: c.rect.as_array(),
                        })
                        .collect(),
                    line_id: line_of[wi],
                })
                .collect(),
            entities: self
                .entities
                .iter()
                .map(|e| EntityAnnotation {
                    word_ids: e.word_ids.clone(),
                    category: e.category.clone(),
                    bbox: e.rect.as_array(),
                })
                .collect(),
        }
    }

    /// Rebuild a document from its annotation plus the page image, validating
    /// all invariants.
    pub fn from_annotation(ann: &Annotation, image: Array2<f64>) -> Result<Document> {
        let mut words = Vec::with_capacity(ann.words.len());
        for w in &ann.words {
            let chars: Vec<CharBox> = w
                .chars
                .iter()
                .map(|c| {
                    let mut it = c.c.chars();
                    let ch = it.next().ok_or_else(|| {
                        Error::InvalidDocument("empty character string".into())
                    })?;
                    if it.next().is_some() {
                        return Err(Error::InvalidDocument(format!(
                            "multi-codepoint character {:?}",
                            c.c
                        )));
                    }
                    Ok(CharBox {
                        ch,
                        rect: Rect::from_array(c.bbox),
                    })
                })
                .collect::<Result<_>>()?;
            let word = Word::from_chars(chars)?;
            if word.text != w.text {
                return Err(Error::InvalidDocument(format!(
                    "word text {:?} does not match chars {:?}",
                    w.text, word.text
                )));
            }
            words.push(word);
        }
        let mut line_words: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (wi, w) in ann.words.iter().enumerate() {
            line_words.entry(w.line_id).or_default().push(wi);
        }
        let lines: Vec<Line> = line_words
            .into_values()
            .map(|mut word_ids| {
                word_ids.sort_by(|&a, &b| {
                    words[a]
                        .rect
                        .x0
                        .total_cmp(&words[b].rect.x0)
                        .then(a.cmp(&b))
                });
                let rect = word_ids
                    .iter()
                    .skip(1)
                    .fold(words[word_ids[0]].rect, |acc, &w| acc.union(&words[w].rect));
                Line { word_ids, rect }
            })
            .collect();
        let entities: Vec<Entity> = ann
            .entities
            .iter()
            .map(|e| {
                let centers: Vec<Point> =
                    e.word_ids.iter().map(|&w| words[w].center).collect();
                Ok(Entity {
                    word_ids: e.word_ids.clone(),
                    category: e.category.clone(),
                    rect: Rect::from_array(e.bbox),
                    point: entity_point(&centers)?,
                })
            })
            .collect::<Result<_>>()?;
        let doc = Document {
            width: ann.width as usize,
            height: ann.height as usize,
            image,
            words,
            lines,
            entities,
        };
        doc.validate()?;
        Ok(doc)
    }
}

// ---- on-disk annotation schema ---------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub width: u32,
    pub height: u32,
    pub words: Vec<WordAnnotation>,
    pub entities: Vec<EntityAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WordAnnotation {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub chars: Vec<CharAnnotation>,
    pub line_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CharAnnotation {
    pub c: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EntityAnnotation {
    pub word_ids: Vec<usize>,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Load a grayscale PNG into `[0,1]` floats.
pub fn load_gray_image(path: &std::path::Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    }))
}

/// Write a `[0,1]` float image as 8-bit gray PNG.
pub fn save_gray_image(path: &std::path::Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let buf: Vec<u8> = image
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size matches dimensions");
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entity_point_examples() {
        let p = entity_point(&[Point::new(0.0, 0.0), Point::new(2.0, 2.0)]).unwrap();
        assert_eq!((p.x, p.y), (1.0, 1.0));
        let p = entity_point(&[Point::new(5.0, 7.0)]).unwrap();
        assert_eq!((p.x, p.y), (5.0, 7.0));
        // hand mean: (1+2+6)/3 = 3, (1+3+2)/3 = 2
        let p = entity_point(&[
            Point::new(1.0, 1.0),
            Point::new(2.0, 3.0),
            Point::new(6.0, 2.0),
        ])
        .unwrap();
        assert_eq!((p.x, p.y), (3.0, 2.0));
    }

    #[test]
    fn entity_point_empty_is_an_error() {
        let err = entity_point(&[]).unwrap_err();
        assert!(err.to_string().contains("entity has no words"));
    }

    proptest! {
        #[test]
        fn entity_point_is_permutation_invariant(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..8),
            swap_a in 0usize..8, swap_b in 0usize..8,
        ) {
            let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let mut shuffled = points.clone();
            let (a, b) = (swap_a % points.len(), swap_b % points.len());
            shuffled.swap(a, b);
            let p1 = entity_point(&points).unwrap();
            let p2 = entity_point(&shuffled).unwrap();
            prop_assert!((p1.x - p2.x).abs() < 1e-9 && (p1.y - p2.y).abs() < 1e-9);
        }

        #[test]
        fn entity_point_stays_in_bounding_box(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..8),
        ) {
            let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let p = entity_point(&points).unwrap();
            let eps = 1e-9;
            let minx = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
            let maxx = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
            let miny = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
            let maxy = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.x >= minx - eps && p.x <= maxx + eps);
            prop_assert!(p.y >= miny - eps && p.y <= maxy + eps);
        }
    }

    #[test]
    fn annotation_roundtrip() {
        let chars = vec![
            CharBox {
                ch: 'a',
                rect: Rect::new(2.0, 2.0, 8.0, 16.0),
            },
            CharBox {
                ch: 'b',
                rect: Rect::new(8.0, 2.0, 14.0, 16.0),
            },
        ];
        let word = Word::from_chars(chars).unwrap();
        assert_eq!(word.text, "ab");
        let doc = Document {
            image: Array2::from_elem((32, 32), 1.0),
            width: 32,
            height: 32,
            entities: vec![Entity {
                word_ids: vec![0],
                category: "key".into(),
                rect: Rect::new(1.0, 1.0, 15.0, 17.0),
                point: word.center,
            }],
            lines: vec![Line {
                word_ids: vec![0],
                rect: word.rect,
            }],
            words: vec![word],
        };
        doc.validate().unwrap();
        let ann = doc.to_annotation();
        let json = serde_json::to_string(&ann).unwrap();
        let parsed: Annotation = serde_json::from_str(&json).unwrap();
        let doc2 = Document::from_annotation(&parsed, doc.image.clone()).unwrap();
        assert_eq!(doc2.words[0].text, "ab");
        assert_eq!(doc2.entities[0].category, "key");
    }

    #[test]
    fn unknown_schema_fields_are_rejected() {
        let json = r#"{"width":8,"height":8,"words":[],"entities":[],"extra":1}"#;
        assert!(serde_json::from_str::<Annotation>(json).is_err());
    }

    #[test]
    fn validation_rejects_word_in_two_entities() {
        let chars = vec![CharBox {
            ch: 'a',
            rect: Rect::new(2.0, 2.0, 8.0, 16.0),
        }];
        let word = Word::from_chars(chars).unwrap();
        let ent = Entity {
            word_ids: vec![0],
            category: "key".into(),
            rect: Rect::new(0.0, 0.0, 20.0, 20.0),
            point: word.center,
        };
        let doc = Document {
            image: Array2::from_elem((32, 32), 1.0),
            width: 32,
            height: 32,
            entities: vec![ent.clone(), ent],
            lines: vec![Line {
                word_ids: vec![0],
                rect: word.rect,
            }],
            words: vec![word],
        };
        assert!(doc.validate().is_err());
    }
}
