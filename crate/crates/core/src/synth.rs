//! Synthetic paired data: scenes of colored shapes on a grid, captions from a
//! small spatial grammar, the semantic oracle and the half-and-half mixers.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::{Cell, Color, GridImage, Shape, TokenId, PAD, SEP};

pub const GRAMMAR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

/// One to three objects on distinct cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub size: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn render(&self) -> GridImage {
        let mut g = GridImage::blank(self.size);
        for o in &self.objects {
            g.set(o.row, o.col, Cell::Object(o.shape, o.color));
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Above,
        Relation::Below,
        Relation::LeftOf,
        Relation::RightOf,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
        }
    }

    /// Strict comparison of cell coordinates.
    pub fn holds(self, subject: (usize, usize), object: (usize, usize)) -> bool {
        match self {
            Relation::Above => subject.0 < object.0,
            Relation::Below => subject.0 > object.0,
            Relation::LeftOf => subject.1 < object.1,
            Relation::RightOf => subject.1 > object.1,
        }
    }
}

/// An attribute pair named by a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mention {
    pub color: Color,
    pub shape: Shape,
}

impl Mention {
    fn cell(self) -> Cell {
        Cell::Object(self.shape, self.color)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaptionSpec {
    Single(Mention),
    Relational(Mention, Relation, Mention),
}

impl fmt::Display for CaptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptionSpec::Single(m) => write!(f, "a {} {}", m.color.word(), m.shape.word()),
            CaptionSpec::Relational(a, r, b) => write!(
                f,
                "a {} {} {} a {} {}",
                a.color.word(),
                a.shape.word(),
                r.words(),
                b.color.word(),
                b.shape.word()
            ),
        }
    }
}

impl CaptionSpec {
    /// Parses a grammar sentence; anything else is a parse error.
    pub fn parse(caption: &str) -> Result<Self> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let mention = |w: &[&str]| -> Result<Mention> {
            if w.len() != 3 || w[0] != "a" {
                return Err(Error::Parse(format!("expected `a <color> <shape>` in `{caption}`")));
            }
            let color = Color::from_word(w[1])
                .ok_or_else(|| Error::Parse(format!("`{}` is not a color", w[1])))?;
            let shape = Shape::from_word(w[2])
                .ok_or_else(|| Error::Parse(format!("`{}` is not a shape", w[2])))?;
            Ok(Mention { color, shape })
        };
        match words.len() {
            3 => Ok(CaptionSpec::Single(mention(&words)?)),
            7 | 8 => {
                let a = mention(&words[..3])?;
                let (rel, rest) = match (words[3], words.get(4).copied()) {
                    ("above", _) => (Relation::Above, &words[4..]),
                    ("below", _) => (Relation::Below, &words[4..]),
                    ("left", Some("of")) => (Relation::LeftOf, &words[5..]),
                    ("right", Some("of")) => (Relation::RightOf, &words[5..]),
                    _ => return Err(Error::Parse(format!("no relation in `{caption}`"))),
                };
                Ok(CaptionSpec::Relational(a, rel, mention(rest)?))
            }
            n => Err(Error::Parse(format!("{n}-word caption `{caption}` is not a grammar sentence"))),
        }
    }

    /// Every sentence the grammar can produce.
    pub fn enumerate() -> Vec<CaptionSpec> {
        let mentions: Vec<Mention> = Color::ALL
            .iter()
            .flat_map(|&color| Shape::ALL.iter().map(move |&shape| Mention { color, shape }))
            .collect();
        let mut out: Vec<CaptionSpec> = mentions.iter().map(|&m| CaptionSpec::Single(m)).collect();
        for &a in &mentions {
            for r in Relation::ALL {
                for &b in &mentions {
                    out.push(CaptionSpec::Relational(a, r, b));
                }
            }
        }
        out
    }

    pub fn word_count(&self) -> usize {
        self.to_string().split_whitespace().count()
    }
}

/// True iff the caption's mentioned objects exist and its relation holds for
/// at least one binding of distinct matching cells.
pub fn oracle_check(img: &GridImage, caption: &str) -> Result<bool> {
    let spec = CaptionSpec::parse(caption)?;
    Ok(spec_holds(img, &spec))
}

pub fn spec_holds(img: &GridImage, spec: &CaptionSpec) -> bool {
    let cells_of = |m: Mention| -> Vec<(usize, usize)> {
        let target = m.cell();
        let n = img.size();
        (0..n * n)
            .filter(|&i| img.cells()[i] == target)
            .map(|i| (i / n, i % n))
            .collect()
    };
    match *spec {
        CaptionSpec::Single(m) => !cells_of(m).is_empty(),
        CaptionSpec::Relational(a, rel, b) => {
            let (sa, sb) = (cells_of(a), cells_of(b));
            sa.iter()
                .any(|&p| sb.iter().any(|&q| p != q && rel.holds(p, q)))
        }
    }
}

/// Draws a random scene and a caption that is true of it.
pub fn generate_sample<R: Rng>(rng: &mut R, size: usize) -> (GridImage, String) {
    loop {
        let scene = random_scene(rng, size);
        let spec = random_true_caption(rng, &scene);
        let img = scene.render();
        let caption = spec.to_string();
        if spec_holds(&img, &spec) {
            return (img, caption);
        }
    }
}

pub fn random_scene<R: Rng>(rng: &mut R, size: usize) -> Scene {
    let n_obj = rng.gen_range(1..=3usize);
    let mut cells: Vec<usize> = (0..size * size).collect();
    let (picked, _) = cells.partial_shuffle(rng, n_obj);
    let objects = picked
        .iter()
        .map(|&c| Object {
            shape: Shape::ALL[rng.gen_range(0..3)],
            color: Color::ALL[rng.gen_range(0..4)],
            row: c / size,
            col: c % size,
        })
        .collect();
    Scene { size, objects }
}

fn random_true_caption<R: Rng>(rng: &mut R, scene: &Scene) -> CaptionSpec {
    let mention = |o: &Object| Mention {
        color: o.color,
        shape: o.shape,
    };
    let objs = &scene.objects;
    if objs.len() == 1 || rng.gen_bool(0.5) {
        return CaptionSpec::Single(mention(&objs[rng.gen_range(0..objs.len())]));
    }
    let i = rng.gen_range(0..objs.len());
    let mut j = rng.gen_range(0..objs.len() - 1);
    if j >= i {
        j += 1;
    }
    let (a, b) = (&objs[i], &objs[j]);
    let holding: Vec<Relation> = Relation::ALL
        .into_iter()
        .filter(|r| r.holds((a.row, a.col), (b.row, b.col)))
        .collect();
    let rel = holding[rng.gen_range(0..holding.len())];
    CaptionSpec::Relational(mention(a), rel, mention(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixAxis {
    /// Columns `[0, G/2)` from the first image.
    Horizontal,
    /// Rows `[0, G/2)` from the first image.
    Vertical,
}

pub fn mix_images(x1: &GridImage, x2: &GridImage, axis: MixAxis) -> Result<GridImage> {
    let g = x1.size();
    if x2.size() != g || g % 2 != 0 {
        return Err(Error::Contract(format!(
            "mixing needs equal even grid sizes, got {g} and {}",
            x2.size()
        )));
    }
    let mut out = GridImage::blank(g);
    for r in 0..g {
        for c in 0..g {
            let first = match axis {
                MixAxis::Horizontal => c < g / 2,
                MixAxis::Vertical => r < g / 2,
            };
            out.set(r, c, if first { x1.get(r, c) } else { x2.get(r, c) });
        }
    }
    Ok(out)
}

/// `y1 ⊕ SEP ⊕ y2` truncated to `max_len`, then PAD-filled.
///
/// Inputs are PAD-terminated id lists; returns the ids and occupied length.
pub fn mix_texts(y1: &[TokenId], y2: &[TokenId], max_len: usize) -> (Vec<TokenId>, usize) {
    let words = |y: &[TokenId]| y.iter().copied().take_while(|&t| t != PAD).collect::<Vec<_>>();
    let mut out = words(y1);
    out.push(SEP);
    out.extend(words(y2));
    out.truncate(max_len);
    let used = out.len();
    out.resize(max_len, PAD);
    (out, used)
}

/// A (grid, caption) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: GridImage,
    pub caption: String,
}

impl Sample {
    /// Stable identity of the scene (the exact cell contents).
    pub fn scene_hash(&self) -> String {
        scene_hash(&self.image)
    }

    /// `c0 c1 ... c{G²-1}<TAB>caption`.
    pub fn to_line(&self) -> String {
        let codes: Vec<String> = self.image.cells().iter().map(|c| c.code().to_string()).collect();
        format!("{}\t{}", codes.join(" "), self.caption)
    }

    pub fn from_line(line: &str, size: usize) -> Result<Self> {
        let (cells, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse("shard line has no tab".into()))?;
        let cells = cells
            .split(' ')
            .map(|c| {
                c.parse::<usize>()
                    .ok()
                    .and_then(Cell::from_code)
                    .ok_or_else(|| Error::Parse(format!("bad cell code `{c}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if cells.len() != size * size {
            return Err(Error::Parse(format!(
                "{} cells on a line, expected {}",
                cells.len(),
                size * size
            )));
        }
        CaptionSpec::parse(caption)?;
        Ok(Self {
            image: GridImage::from_cells(size, cells)?,
            caption: caption.to_string(),
        })
    }
}

pub fn scene_hash(img: &GridImage) -> String {
    let mut h = Sha256::new();
    h.update((img.size() as u64).to_le_bytes());
    h.update(img.cells().iter().map(|c| c.code() as u8).collect::<Vec<u8>>());
    hex::encode(&h.finalize()[..16])
}

/// SplitMix64 step; derives independent per-sample seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub grid: usize,
    pub max_text: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub grammar_version: u32,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Generates disjoint train/validation sets; a training scene identical to
/// any validation scene is redrawn.
pub fn make_split(n_train: usize, n_val: usize, seed: u64, size: usize) -> Result<Split> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Contract("split sizes must be positive".into()));
    }
    let draw = |stream: u64, index: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index));
        let (image, caption) = generate_sample(&mut rng, size);
        Sample { image, caption }
    };
    let val: Vec<Sample> = (0..n_val as u64).map(|i| draw(1, i)).collect();
    let held: HashSet<String> = val.iter().map(|s| s.scene_hash()).collect();
    let mut train = Vec::with_capacity(n_train);
    let mut index = 0u64;
    while train.len() < n_train {
        let s = draw(0, index);
        index += 1;
        if !held.contains(&s.scene_hash()) {
            train.push(s);
        }
    }
    Ok(Split { train, val })
}

pub fn write_shard(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in samples {
        writeln!(f, "{}", s.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_shard(path: &Path, size: usize) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_shard(&text, size)
}

pub fn parse_shard(text: &str, size: usize) -> Result<Vec<Sample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            Sample::from_line(l, size).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Writes `train.tsv`, `val.tsv`, `vocab.json` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, split: &Split, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_shard(&dir.join("train.tsv"), &split.train)?;
    write_shard(&dir.join("val.tsv"), &split.val)?;
    let vocab = crate::vocab::VocabFile::current().to_json();
    fs::write(dir.join("vocab.json"), vocab).map_err(|e| Error::io(dir.join("vocab.json"), e))?;
    let m = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), m).map_err(|e| Error::io(dir.join("manifest.json"), e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join("manifest.json");
    let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&s)?)
}
