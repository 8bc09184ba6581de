//! GlyphCount: a synthetic visual counting task.
//!
//! Each instance is a raster with a few glyphs of each class and a query
//! naming one class; the answer is the count of that class written as
//! `OPEN digits CLOSE EOS`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::rng_from;

pub const VOCAB_SIZE: usize = 13;
pub const GLYPH_SIDE: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Vocabulary entry: `D0..D9` are ids 0..9, then `OPEN`, `CLOSE`, `EOS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(u8);

impl Token {
    pub const OPEN: Token = Token(10);
    pub const CLOSE: Token = Token(11);
    pub const EOS: Token = Token(12);

    pub fn digit(d: u8) -> Token {
        assert!(d < 10, "digit out of range");
        Token(d)
    }

    pub fn from_id(id: usize) -> Option<Token> {
        (id < VOCAB_SIZE).then_some(Token(id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn as_digit(self) -> Option<u8> {
        (self.0 < 10).then_some(self.0)
    }

    pub fn name(self) -> String {
        match self {
            Token::OPEN => "OPEN".into(),
            Token::CLOSE => "CLOSE".into(),
            Token::EOS => "EOS".into(),
            Token(d) => format!("D{d}"),
        }
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Glyph classes, 5x5, row-major. All touch every side of their box.
pub const GLYPHS: [[[u8; GLYPH_SIDE]; GLYPH_SIDE]; 3] = [
    // cross
    [
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [1, 1, 1, 1, 1],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
    ],
    // square
    [
        [1, 1, 1, 1, 1],
        [1, 0, 0, 0, 1],
        [1, 0, 0, 0, 1],
        [1, 0, 0, 0, 1],
        [1, 1, 1, 1, 1],
    ],
    // diamond
    [
        [0, 0, 1, 0, 0],
        [0, 1, 0, 1, 0],
        [1, 0, 0, 0, 1],
        [0, 1, 0, 1, 0],
        [0, 0, 1, 0, 0],
    ],
];

pub const SHAPE_NAMES: [&str; 3] = ["cross", "square", "diamond"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Raster side length in pixels.
    pub grid: usize,
    /// Number of glyph classes in play.
    pub shapes: usize,
    pub max_per_shape: usize,
    /// Longest trajectory the policy may emit.
    pub max_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            grid: 32,
            shapes: 3,
            max_per_shape: 5,
            max_len: 6,
        }
    }
}

impl TaskSpec {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Structural checks. `max_per_shape = 0` is accepted (blank images).
    pub fn validate(&self) -> Result<()> {
        if self.grid < 16 {
            return Err(Error::Config(format!("task.grid = {} must be >= 16", self.grid)));
        }
        if !(2..=GLYPHS.len()).contains(&self.shapes) {
            return Err(Error::Config(format!(
                "task.shapes = {} must be in [2, {}]",
                self.shapes,
                GLYPHS.len()
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!(
                "task.max_len = {} must be >= 4",
                self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub image: Raster,
    pub query_shape: usize,
    pub truth: usize,
    pub seed: u64,
}

fn stamp(image: &mut Raster, shape: usize, x0: usize, y0: usize) {
    for (dy, row) in GLYPHS[shape].iter().enumerate() {
        for (dx, &on) in row.iter().enumerate() {
            if on == 1 {
                image.set(x0 + dx, y0 + dy, 1.0);
            }
        }
    }
}

/// Draw one instance. Glyph boxes may touch but never overlap.
pub fn sample_instance(spec: &TaskSpec, rng_seed: u64) -> Result<TaskInstance> {
    spec.validate()?;
    let mut rng = rng_from(rng_seed);
    let counts: Vec<usize> = (0..spec.shapes)
        .map(|_| rng.gen_range(0..=spec.max_per_shape))
        .collect();
    let query_shape = rng.gen_range(0..spec.shapes);

    let span = spec.grid - GLYPH_SIDE + 1;
    let mut boxes: Vec<(usize, usize)> = Vec::new();
    let mut image = Raster::zeros(spec.grid, spec.grid);
    for (shape, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let (x, y) = (rng.gen_range(0..span), rng.gen_range(0..span));
                let clear = boxes.iter().all(|&(bx, by)| {
                    x.abs_diff(bx) >= GLYPH_SIDE || y.abs_diff(by) >= GLYPH_SIDE
                });
                if clear {
                    boxes.push((x, y));
                    stamp(&mut image, shape, x, y);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place glyph after {PLACEMENT_ATTEMPTS} attempts (grid {} too dense)",
                    spec.grid
                )));
            }
        }
    }
    Ok(TaskInstance {
        image,
        query_shape,
        truth: counts[query_shape],
        seed: rng_seed,
    })
}

/// Parse `OPEN D+ CLOSE EOS` into its base-10 value.
pub fn parse_answer(tokens: &[Token]) -> Option<u64> {
    let (first, rest) = tokens.split_first()?;
    if *first != Token::OPEN || rest.len() < 3 {
        return None;
    }
    let (digits, tail) = rest.split_at(rest.len() - 2);
    if tail != [Token::CLOSE, Token::EOS] || digits.is_empty() {
        return None;
    }
    digits.iter().try_fold(0u64, |acc, t| {
        let d = t.as_digit()?;
        acc.checked_mul(10)?.checked_add(u64::from(d))
    })
}

/// Canonical token encoding of a count.
pub fn encode_answer(n: u64) -> Vec<Token> {
    let mut out = vec![Token::OPEN];
    out.extend(n.to_string().bytes().map(|b| Token::digit(b - b'0')));
    out.push(Token::CLOSE);
    out.push(Token::EOS);
    out
}

/// Rule-based outcome reward against the clean instance: 1 iff well-formed
/// and equal to the true count.
pub fn reward(instance: &TaskInstance, tokens: &[Token]) -> f64 {
    match parse_answer(tokens) {
        Some(n) if n == instance.truth as u64 => 1.0,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const D: fn(u8) -> Token = Token::digit;

    /// Count 5x5 windows equal to the glyph bitmap.
    fn template_count(img: &Raster, shape: usize) -> usize {
        let g = img.width();
        let px = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= g as isize || y >= g as isize {
                0.0
            } else {
                img.get(x as usize, y as usize)
            }
        };
        let mut n = 0;
        for y0 in 0..=(g - GLYPH_SIDE) as isize {
            for x0 in 0..=(g - GLYPH_SIDE) as isize {
                let mut ok = true;
                for dy in 0..GLYPH_SIDE as isize {
                    for dx in 0..GLYPH_SIDE as isize {
                        let want = f64::from(GLYPHS[shape][dy as usize][dx as usize]);
                        if px(x0 + dx, y0 + dy) != want {
                            ok = false;
                        }
                    }
                }
                n += ok as usize;
            }
        }
        n
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = TaskSpec::default();
        assert_eq!(
            sample_instance(&spec, 1).unwrap(),
            sample_instance(&spec, 1).unwrap()
        );
    }

    #[test]
    fn truth_matches_template_count() {
        let spec = TaskSpec::default();
        for seed in 0..2000 {
            let inst = sample_instance(&spec, seed).unwrap();
            assert!(inst.truth <= 5);
            assert_eq!(template_count(&inst.image, inst.query_shape), inst.truth, "seed {seed}");
        }
    }

    #[test]
    fn empty_spec_gives_blank_image() {
        let spec = TaskSpec {
            max_per_shape: 0,
            ..TaskSpec::default()
        };
        let inst = sample_instance(&spec, 9).unwrap();
        assert_eq!(inst.truth, 0);
        assert_eq!(inst.image.total_intensity(), 0.0);
    }

    #[test]
    fn overcrowded_spec_fails_generation() {
        let spec = TaskSpec {
            grid: 16,
            max_per_shape: 40,
            ..TaskSpec::default()
        };
        let err = (0..20).find_map(|s| sample_instance(&spec, s).err()).unwrap();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            TaskSpec { grid: 8, ..TaskSpec::default() },
            TaskSpec { shapes: 1, ..TaskSpec::default() },
            TaskSpec { shapes: 4, ..TaskSpec::default() },
            TaskSpec { max_len: 3, ..TaskSpec::default() },
        ] {
            assert!(spec.validate().is_err());
        }
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_answer(&[Token::OPEN, D(3), Token::CLOSE, Token::EOS]), Some(3));
        assert_eq!(parse_answer(&[D(3), Token::EOS]), None);
        assert_eq!(
            parse_answer(&[Token::OPEN, D(1), D(2), Token::CLOSE, Token::EOS]),
            Some(12)
        );
        assert_eq!(parse_answer(&[Token::OPEN, Token::CLOSE, Token::EOS]), None);
        assert_eq!(
            parse_answer(&[Token::OPEN, D(1), Token::CLOSE, Token::EOS, Token::EOS]),
            None
        );
        assert_eq!(parse_answer(&[]), None);
    }

    #[test]
    fn reward_examples() {
        let inst = TaskInstance {
            image: Raster::zeros(16, 16),
            query_shape: 0,
            truth: 3,
            seed: 0,
        };
        assert_eq!(reward(&inst, &[Token::OPEN, D(3), Token::CLOSE, Token::EOS]), 1.0);
        assert_eq!(reward(&inst, &[Token::OPEN, D(4), Token::CLOSE, Token::EOS]), 0.0);
        assert_eq!(reward(&inst, &[Token::OPEN, D(3), Token::EOS]), 0.0);
    }

    #[test]
    fn encode_parse_roundtrip_0_to_99() {
        for n in 0..100 {
            assert_eq!(parse_answer(&encode_answer(n)), Some(n));
        }
    }

    proptest! {
        #[test]
        fn reward_is_binary(ids in proptest::collection::vec(0usize..VOCAB_SIZE, 0..8), truth in 0usize..6) {
            let tokens: Vec<Token> = ids.into_iter().map(|i| Token::from_id(i).unwrap()).collect();
            let inst = TaskInstance { image: Raster::zeros(16, 16), query_shape: 0, truth, seed: 0 };
            let r = reward(&inst, &tokens);
            prop_assert!(r == 0.0 || r == 1.0);
        }
    }
}
