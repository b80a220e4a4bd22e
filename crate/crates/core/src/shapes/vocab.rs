//! Fixed word-level vocabulary.
//!
//! Every shape, color and item word is a single token. Items are single
//! letters: uppercase for the evaluation pool, lowercase for the estimation
//! pool.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Color, Pool, Shape, TaskError};

pub const N_ITEMS: usize = 26;

pub const BOS_ID: u32 = 0;
pub const IMG_ID: u32 = 1;
pub const ANS_ID: u32 = 2;

const SPECIALS: [&str; 3] = ["<bos>", "<img>", "<ans>"];
const TEMPLATE: [&str; 9] = [
    "the", "object", "contains", "item", ".", "what", "does", "contain", "?",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    word_to_id: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// The task vocabulary; identical for every instance.
    pub fn standard() -> Self {
        let mut words: Vec<String> = Vec::new();
        words.extend(SPECIALS.iter().map(|w| w.to_string()));
        words.extend(TEMPLATE.iter().map(|w| w.to_string()));
        for s in Shape::EVAL.into_iter().chain(Shape::ESTIMATION) {
            words.push(s.word().to_string());
        }
        for c in Color::EVAL.into_iter().chain(Color::ESTIMATION) {
            words.push(c.word().to_string());
        }
        for l in b'A'..=b'Z' {
            words.push((l as char).to_string());
        }
        for l in b'a'..=b'z' {
            words.push((l as char).to_string());
        }
        let word_to_id = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, word_to_id }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn bos(&self) -> u32 {
        BOS_ID
    }

    pub fn img(&self) -> u32 {
        IMG_ID
    }

    pub fn ans(&self) -> u32 {
        ANS_ID
    }

    pub fn shape_token(&self, shape: Shape) -> u32 {
        self.id(shape.word()).expect("shape word in vocab")
    }

    pub fn color_token(&self, color: Color) -> u32 {
        self.id(color.word()).expect("color word in vocab")
    }

    /// Token of item letter `index` (0..26) in the given pool.
    pub fn item_token(&self, pool: Pool, index: usize) -> u32 {
        debug_assert!(index < N_ITEMS);
        let letter = match pool {
            Pool::Eval => (b'A' + index as u8) as char,
            Pool::Estimation => (b'a' + index as u8) as char,
        };
        let mut buf = [0u8; 4];
        self.id(letter.encode_utf8(&mut buf)).expect("item in vocab")
    }

    /// Whitespace word-level encoding.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, TaskError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| TaskError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Inverse of [`Self::tokenize`] on valid ids, words joined by one space.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TaskError> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let word = self.word(id).ok_or(TaskError::UnknownTokenId(id))?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(word);
        }
        Ok(out)
    }
}

/// Context sentence for one tuple: `the <color> object contains item <X> .`
pub fn context_sentence(color: Color, item_word: &str) -> String {
    let mut s = String::new();
    s.push_str("the ");
    s.push_str(color.word());
    s.push_str(" object contains item ");
    s.push_str(item_word);
    s.push_str(" .");
    s
}

/// Question sentence: `what does the <shape> contain ?`
pub fn question_sentence(shape: Shape) -> String {
    let mut s = String::new();
    s.push_str("what does the ");
    s.push_str(shape.word());
    s.push_str(" contain ?");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_recovers_color_and_item_positions() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("the green object contains item P").unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[1], v.color_token(Color::Green));
        assert_eq!(ids[5], v.item_token(Pool::Eval, (b'P' - b'A') as usize));
    }

    #[test]
    fn empty_text_gives_empty_sequence() {
        let v = Vocabulary::standard();
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn unknown_word_is_named_in_error() {
        let v = Vocabulary::standard();
        match v.tokenize("the shiny object") {
            Err(TaskError::UnknownWord(w)) => assert_eq!(w, "shiny"),
            other => panic!("expected unknown word, got {other:?}"),
        }
    }

    #[test]
    fn ids_are_bijective() {
        let v = Vocabulary::standard();
        for id in 0..v.len() as u32 {
            let w = v.word(id).unwrap();
            assert_eq!(v.id(w), Some(id), "word {w:?}");
        }
    }

    /// Exhaustive round trip over every template instantiation in both pools.
    #[test]
    fn round_trip_over_all_template_instantiations() {
        let v = Vocabulary::standard();
        for pool in [Pool::Eval, Pool::Estimation] {
            let colors = Color::of_pool(pool);
            let shapes = Shape::of_pool(pool);
            for c0 in colors {
                for c1 in colors {
                    if c0 == c1 {
                        continue;
                    }
                    for i0 in 0..N_ITEMS {
                        let w0 = v.word(v.item_token(pool, i0)).unwrap().to_string();
                        let i1 = (i0 + 7) % N_ITEMS;
                        let w1 = v.word(v.item_token(pool, i1)).unwrap().to_string();
                        let mut text = context_sentence(c0, &w0);
                        text.push(' ');
                        text.push_str(&context_sentence(c1, &w1));
                        let ids = v.tokenize(&text).unwrap();
                        assert_eq!(v.detokenize(&ids).unwrap(), text);
                    }
                }
            }
            for s in shapes {
                let q = question_sentence(s);
                let ids = v.tokenize(&q).unwrap();
                assert_eq!(v.detokenize(&ids).unwrap(), q);
            }
        }
    }

    #[test]
    fn pools_share_no_content_tokens() {
        let v = Vocabulary::standard();
        let mut eval: Vec<u32> = Vec::new();
        let mut est: Vec<u32> = Vec::new();
        for s in Shape::EVAL {
            eval.push(v.shape_token(s));
        }
        for s in Shape::ESTIMATION {
            est.push(v.shape_token(s));
        }
        for c in Color::EVAL {
            eval.push(v.color_token(c));
        }
        for c in Color::ESTIMATION {
            est.push(v.color_token(c));
        }
        for i in 0..N_ITEMS {
            eval.push(v.item_token(Pool::Eval, i));
            est.push(v.item_token(Pool::Estimation, i));
        }
        for t in &eval {
            assert!(!est.contains(t));
        }
    }
}
