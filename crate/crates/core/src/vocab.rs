//! Unified token vocabulary, the grid image codec, the word-level text codec
//! and the concatenated sequence layout.
//!
//! Id assignment:
//! - `[0, 13)` image cells: background, then `(shape, color)` with shape
//!   outermost (square, circle, triangle) and color innermost
//!   (red, green, blue, yellow).
//! - `[13, 26)` words in [`WORDS`] order.
//! - `[26, 36)` specials in [`Special::ALL`] order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }

    fn glyph(self) -> char {
        match self {
            Shape::Square => 's',
            Shape::Circle => 'c',
            Shape::Triangle => 't',
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    fn glyph(self) -> char {
        match self {
            Color::Red => 'R',
            Color::Green => 'G',
            Color::Blue => 'B',
            Color::Yellow => 'Y',
        }
    }
}

/// Content of one grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Cell {
    #[default]
    Background,
    Object(Shape, Color),
}

pub const N_CELL_CODES: usize = 13;

impl Cell {
    pub fn code(self) -> usize {
        match self {
            Cell::Background => 0,
            Cell::Object(s, c) => 1 + s as usize * 4 + c as usize,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        match code {
            0 => Some(Cell::Background),
            1..=12 => {
                let k = code - 1;
                Some(Cell::Object(Shape::ALL[k / 4], Color::ALL[k % 4]))
            }
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            Cell::Background => "background".to_string(),
            Cell::Object(s, c) => format!("{} {}", c.word(), s.word()),
        }
    }
}

/// Closed word list of the caption grammar, in id order.
pub const WORDS: [&str; 13] = [
    "a", "red", "green", "blue", "yellow", "square", "circle", "triangle", "above", "below", "left",
    "right", "of",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Boi,
    Bot,
    Mask,
    Pad,
    Sep,
    Left,
    Right,
    Top,
    Bottom,
    None,
}

impl Special {
    pub const ALL: [Special; 10] = [
        Special::Boi,
        Special::Bot,
        Special::Mask,
        Special::Pad,
        Special::Sep,
        Special::Left,
        Special::Right,
        Special::Top,
        Special::Bottom,
        Special::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Boi => "<BOI>",
            Special::Bot => "<BOT>",
            Special::Mask => "<MASK>",
            Special::Pad => "<PAD>",
            Special::Sep => "<SEP>",
            Special::Left => "<LEFT>",
            Special::Right => "<RIGHT>",
            Special::Top => "<TOP>",
            Special::Bottom => "<BOTTOM>",
            Special::None => "<NONE>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Image,
    Text,
    Special(Special),
}

pub const IMAGE_BASE: TokenId = 0;
pub const TEXT_BASE: TokenId = N_CELL_CODES;
pub const SPECIAL_BASE: TokenId = TEXT_BASE + WORDS.len();
pub const VOCAB_SIZE: usize = SPECIAL_BASE + Special::ALL.len();

pub fn special(s: Special) -> TokenId {
    SPECIAL_BASE + s as usize
}

pub const MASK: TokenId = SPECIAL_BASE + Special::Mask as usize;
pub const PAD: TokenId = SPECIAL_BASE + Special::Pad as usize;
pub const SEP: TokenId = SPECIAL_BASE + Special::Sep as usize;
pub const BOI: TokenId = SPECIAL_BASE + Special::Boi as usize;
pub const BOT: TokenId = SPECIAL_BASE + Special::Bot as usize;
pub const NONE: TokenId = SPECIAL_BASE + Special::None as usize;

pub fn category(id: TokenId) -> Option<Category> {
    if id < TEXT_BASE {
        Some(Category::Image)
    } else if id < SPECIAL_BASE {
        Some(Category::Text)
    } else if id < VOCAB_SIZE {
        Some(Category::Special(Special::ALL[id - SPECIAL_BASE]))
    } else {
        None
    }
}

pub fn is_image(id: TokenId) -> bool {
    id < TEXT_BASE
}

pub fn is_text(id: TokenId) -> bool {
    (TEXT_BASE..SPECIAL_BASE).contains(&id)
}

pub fn is_special(id: TokenId) -> bool {
    (SPECIAL_BASE..VOCAB_SIZE).contains(&id)
}

pub fn image_id(cell: Cell) -> TokenId {
    IMAGE_BASE + cell.code()
}

pub fn word_id(word: &str) -> Option<TokenId> {
    WORDS.iter().position(|w| *w == word).map(|i| TEXT_BASE + i)
}

/// Human-readable name of any id.
pub fn token_name(id: TokenId) -> String {
    match category(id) {
        Some(Category::Image) => Cell::from_code(id - IMAGE_BASE).unwrap().name(),
        Some(Category::Text) => WORDS[id - TEXT_BASE].to_string(),
        Some(Category::Special(s)) => s.name().to_string(),
        None => format!("<?{id}>"),
    }
}

/// The versioned vocabulary file written next to checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    pub version: u32,
    pub image_tokens: Vec<String>,
    pub words: Vec<String>,
    pub specials: Vec<String>,
}

pub const VOCAB_FILE_VERSION: u32 = 1;

impl VocabFile {
    pub fn current() -> Self {
        Self {
            version: VOCAB_FILE_VERSION,
            image_tokens: (0..N_CELL_CODES)
                .map(|c| Cell::from_code(c).unwrap().name())
                .collect(),
            words: WORDS.iter().map(|w| w.to_string()).collect(),
            specials: Special::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    /// Parses a vocabulary file and checks it matches this build's id assignment.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: VocabFile = serde_json::from_str(s)?;
        if v.version != VOCAB_FILE_VERSION {
            return Err(Error::Vocab(format!("unsupported vocabulary version {}", v.version)));
        }
        if v != Self::current() {
            return Err(Error::Vocab(
                "vocabulary file does not match the built-in id assignment".into(),
            ));
        }
        Ok(v)
    }
}

/// A square grid of cells, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridImage {
    size: usize,
    cells: Vec<Cell>,
}

impl GridImage {
    pub fn blank(size: usize) -> Self {
        Self {
            size,
            cells: vec![Cell::Background; size * size],
        }
    }

    pub fn from_cells(size: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::Contract(format!(
                "{} cells for a {size}x{size} grid",
                cells.len()
            )));
        }
        Ok(Self { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, cell: Cell) {
        self.cells[row * self.size + col] = cell;
    }

    /// Raster-order image tokens.
    pub fn encode(&self) -> Vec<TokenId> {
        self.cells.iter().map(|&c| image_id(c)).collect()
    }

    pub fn decode(size: usize, ids: &[TokenId]) -> Result<Self> {
        if ids.len() != size * size {
            return Err(Error::Contract(format!(
                "{} image tokens for a {size}x{size} grid",
                ids.len()
            )));
        }
        let cells = ids
            .iter()
            .map(|&id| {
                if is_image(id) {
                    Ok(Cell::from_code(id - IMAGE_BASE).unwrap())
                } else {
                    Err(Error::Vocab(format!("id {id} ({}) is not an image token", token_name(id))))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size, cells })
    }

    /// Text-art rendering: `.` for background, color letter + shape letter otherwise.
    pub fn to_art(&self) -> String {
        let mut out = String::new();
        for r in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|c| match self.get(r, c) {
                    Cell::Background => " .".to_string(),
                    Cell::Object(s, col) => format!("{}{}", col.glyph(), s.glyph()),
                })
                .collect();
            out.push_str(row.join(" ").trim_end());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for GridImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_art())
    }
}

/// Word-level caption codec over the closed grammar vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextCodec {
    pub max_len: usize,
}

impl TextCodec {
    pub fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    /// Returns `max_len` ids (words then PAD) and the word count.
    pub fn encode(&self, caption: &str) -> Result<(Vec<TokenId>, usize)> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Vocab("empty caption".into()));
        }
        if words.len() > self.max_len {
            return Err(Error::Vocab(format!(
                "caption has {} words, limit is {}",
                words.len(),
                self.max_len
            )));
        }
        let mut ids = Vec::with_capacity(self.max_len);
        for w in &words {
            ids.push(word_id(w).ok_or_else(|| Error::Vocab(format!("unknown word `{w}`")))?);
        }
        ids.resize(self.max_len, PAD);
        Ok((ids, words.len()))
    }

    /// Words up to the first PAD; any other non-word id is an error.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD {
                break;
            }
            if !is_text(id) {
                return Err(Error::Vocab(format!("id {id} ({}) is not a word", token_name(id))));
            }
            words.push(WORDS[id - TEXT_BASE]);
        }
        Ok(words.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
    Special,
}

/// Which modality block comes first in the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    /// `[BOI, SEL_I, x.., BOT, SEL_T, y..]`, the canonical layout.
    ImageFirst,
    /// `[BOT, SEL_T, y.., BOI, SEL_I, x..]`, used by the causal baseline for T2I.
    TextFirst,
}

/// Position arithmetic for the concatenated sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub grid: usize,
    pub n_text: usize,
    pub order: Order,
}

impl Layout {
    pub fn new(grid: usize, n_text: usize) -> Self {
        Self {
            grid,
            n_text,
            order: Order::ImageFirst,
        }
    }

    pub fn with_order(self, order: Order) -> Self {
        Self { order, ..self }
    }

    pub fn n_image(&self) -> usize {
        self.grid * self.grid
    }

    pub fn seq_len(&self) -> usize {
        self.n_image() + self.n_text + 4
    }

    pub fn boi(&self) -> usize {
        match self.order {
            Order::ImageFirst => 0,
            Order::TextFirst => self.n_text + 2,
        }
    }

    pub fn sel_image(&self) -> usize {
        self.boi() + 1
    }

    pub fn bot(&self) -> usize {
        match self.order {
            Order::ImageFirst => self.n_image() + 2,
            Order::TextFirst => 0,
        }
    }

    pub fn sel_text(&self) -> usize {
        self.bot() + 1
    }

    /// Sequence position of image token `i`.
    pub fn image_pos(&self, i: usize) -> usize {
        self.boi() + 2 + i
    }

    /// Sequence position of text token `j`.
    pub fn text_pos(&self, j: usize) -> usize {
        self.bot() + 2 + j
    }

    pub fn modality(&self, pos: usize) -> Modality {
        let img = self.image_pos(0)..self.image_pos(0) + self.n_image();
        let txt = self.text_pos(0)..self.text_pos(0) + self.n_text;
        if img.contains(&pos) {
            Modality::Image
        } else if txt.contains(&pos) {
            Modality::Text
        } else {
            Modality::Special
        }
    }
}

/// A fully laid-out input sequence with its per-position mask flags.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub layout: Layout,
    pub ids: Vec<TokenId>,
    pub masked: Vec<bool>,
}

impl TokenSequence {
    /// Lays out `x` (N_I image ids) and `y` (N_T text ids) with the given selectors.
    pub fn build(
        layout: Layout,
        x: &[TokenId],
        y: &[TokenId],
        sel_image: TokenId,
        sel_text: TokenId,
    ) -> Result<Self> {
        if x.len() != layout.n_image() || y.len() != layout.n_text {
            return Err(Error::Contract(format!(
                "expected {} image and {} text tokens, got {} and {}",
                layout.n_image(),
                layout.n_text,
                x.len(),
                y.len()
            )));
        }
        let mut ids = vec![NONE; layout.seq_len()];
        ids[layout.boi()] = BOI;
        ids[layout.sel_image()] = sel_image;
        ids[layout.bot()] = BOT;
        ids[layout.sel_text()] = sel_text;
        for (i, &t) in x.iter().enumerate() {
            ids[layout.image_pos(i)] = t;
        }
        for (j, &t) in y.iter().enumerate() {
            ids[layout.text_pos(j)] = t;
        }
        let masked = ids.iter().map(|&t| t == MASK).collect();
        let seq = Self { layout, ids, masked };
        seq.validate()?;
        Ok(seq)
    }

    /// Same as [`TokenSequence::build`] with both selector slots holding NONE.
    pub fn plain(layout: Layout, x: &[TokenId], y: &[TokenId]) -> Result<Self> {
        Self::build(layout, x, y, NONE, NONE)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_tokens(&self) -> &[TokenId] {
        let s = self.layout.image_pos(0);
        &self.ids[s..s + self.layout.n_image()]
    }

    pub fn text_tokens(&self) -> &[TokenId] {
        let s = self.layout.text_pos(0);
        &self.ids[s..s + self.layout.n_text]
    }

    pub fn set_image(&mut self, i: usize, id: TokenId) {
        let p = self.layout.image_pos(i);
        self.ids[p] = id;
        self.masked[p] = id == MASK;
    }

    pub fn set_text(&mut self, j: usize, id: TokenId) {
        let p = self.layout.text_pos(j);
        self.ids[p] = id;
        self.masked[p] = id == MASK;
    }

    /// Checks the per-position content rules of the layout.
    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        if self.ids.len() != l.seq_len() || self.masked.len() != l.seq_len() {
            return Err(Error::Contract(format!(
                "sequence length {} != {}",
                self.ids.len(),
                l.seq_len()
            )));
        }
        let selector_ok = |t: TokenId| {
            matches!(
                category(t),
                Some(Category::Special(
                    Special::None | Special::Left | Special::Right | Special::Top | Special::Bottom
                ))
            )
        };
        for (pos, &t) in self.ids.iter().enumerate() {
            let ok = match l.modality(pos) {
                Modality::Image => is_image(t) || t == MASK,
                Modality::Text => is_text(t) || t == MASK || t == SEP || t == PAD,
                Modality::Special => {
                    if pos == l.boi() {
                        t == BOI
                    } else if pos == l.bot() {
                        t == BOT
                    } else {
                        selector_ok(t)
                    }
                }
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "token {} not allowed at position {pos} ({:?})",
                    token_name(t),
                    l.modality(pos)
                )));
            }
        }
        Ok(())
    }
}
