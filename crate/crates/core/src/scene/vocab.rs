//! Colors, shapes, the 11-word vocabulary and the utterance grammar.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::SceneError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Gray,
    White,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Gray,
        Color::White,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Blue => [40, 80, 230],
            Color::Green => [30, 180, 60],
            Color::Yellow => [235, 220, 40],
            Color::Gray => [150, 150, 150],
            Color::White => [250, 250, 250],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Gray => "gray",
            Color::White => "white",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_rgb(rgb: [u8; 3]) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.rgb() == rgb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ellipse,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Ellipse];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ellipse => "ellipse",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Background and the single-pixel-color silhouette fill.
pub const BACKGROUND: [u8; 3] = [0, 0, 0];
pub const NEUTRAL_FILL: [u8; 3] = [110, 110, 110];

/// A vocabulary item. Token ids: colors 0..6, shapes 6..10, "shape" 10.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Word {
    Color(Color),
    Shape(Shape),
    /// The generic noun "shape", true of every referent.
    Noun,
}

pub const VOCAB_SIZE: usize = 11;

impl Word {
    pub fn id(self) -> usize {
        match self {
            Word::Color(c) => c.index(),
            Word::Shape(s) => 6 + s.index(),
            Word::Noun => 10,
        }
    }

    pub fn from_id(id: usize) -> Option<Word> {
        match id {
            0..=5 => Some(Word::Color(Color::ALL[id])),
            6..=9 => Some(Word::Shape(Shape::ALL[id - 6])),
            10 => Some(Word::Noun),
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Word> {
        (0..VOCAB_SIZE).filter_map(Word::from_id)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Word::Color(c) => c.name(),
            Word::Shape(s) => s.name(),
            Word::Noun => "shape",
        }
    }

    pub fn parse(s: &str) -> Option<Word> {
        Word::all().find(|w| w.as_str() == s)
    }

    pub fn is_color(self) -> bool {
        matches!(self, Word::Color(_))
    }

    /// Truth-conditional meaning of one word.
    pub fn applies(self, color: Color, shape: Shape) -> bool {
        match self {
            Word::Color(c) => c == color,
            Word::Shape(s) => s == shape,
            Word::Noun => true,
        }
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A grammatical referring expression: a noun (shape word or "shape"),
/// optionally preceded by one color word.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Utterance(Vec<Word>);

impl Utterance {
    pub fn new(words: Vec<Word>) -> Result<Self, SceneError> {
        let ok = match words.as_slice() {
            [noun] => !noun.is_color(),
            [Word::Color(_), noun] => !noun.is_color(),
            _ => false,
        };
        if ok {
            Ok(Self(words))
        } else {
            let text: Vec<&str> = words.iter().map(|w| w.as_str()).collect();
            Err(SceneError::Grammar(text.join(" ")))
        }
    }

    pub fn bare(noun: Word) -> Result<Self, SceneError> {
        Self::new(vec![noun])
    }

    pub fn modified(color: Color, noun: Word) -> Result<Self, SceneError> {
        Self::new(vec![Word::Color(color), noun])
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self, SceneError> {
        let words = ids
            .iter()
            .map(|&i| Word::from_id(i).ok_or(SceneError::UnknownToken(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(words)
    }

    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let words = text
            .split_whitespace()
            .map(|w| Word::parse(w).ok_or_else(|| SceneError::Grammar(text.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(words)
    }

    pub fn words(&self) -> &[Word] {
        &self.0
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|w| w.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_color(&self) -> bool {
        self.0.iter().any(|w| w.is_color())
    }

    pub fn is_true_of(&self, color: Color, shape: Shape) -> bool {
        self.0.iter().all(|w| w.applies(color, shape))
    }

    pub fn strings(&self) -> Vec<String> {
        self.0.iter().map(|w| w.as_str().to_string()).collect()
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text: Vec<&str> = self.0.iter().map(|w| w.as_str()).collect();
        f.write_str(&text.join(" "))
    }
}

/// Nouns in enumeration order: the four shape words, then "shape".
pub fn nouns() -> [Word; 5] {
    [
        Word::Shape(Shape::Circle),
        Word::Shape(Shape::Square),
        Word::Shape(Shape::Triangle),
        Word::Shape(Shape::Ellipse),
        Word::Noun,
    ]
}

/// The 35 utterances in their fixed enumeration order (also the tie-break
/// order): the five one-word nouns, then each color (palette order) combined
/// with each noun.
pub fn utterance_space() -> Vec<Utterance> {
    let mut out: Vec<Utterance> = nouns().into_iter().map(|n| Utterance(vec![n])).collect();
    for c in Color::ALL {
        for n in nouns() {
            out.push(Utterance(vec![Word::Color(c), n]));
        }
    }
    out
}
