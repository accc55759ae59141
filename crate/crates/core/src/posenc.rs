//! Learnable positional tables, sinusoidally initialized, added to token
//! sequences before and after a Tim block.

use alloc::string::ToString;
use alloc::vec;
use core::fmt;
use core::str::FromStr;

use crate::numcore::{Graph, Tensor, Var};
use crate::{Error, Result};

/// `table[pos, 2i] = sin(pos / 10000^(2i/C))`, `table[pos, 2i+1] = cos(..)`.
pub fn sinusoidal_init(len: usize, channels: usize) -> Result<Tensor> {
    if channels % 2 != 0 || channels == 0 || len == 0 {
        return Err(Error::InvalidShape {
            op: "sinusoidal_init",
            shape: vec![len, channels],
            reason: "channels must be even and positive",
        });
    }
    Ok(Tensor::from_fn(&[len, channels], |idx| {
        let (pos, col) = (idx / channels, idx % channels);
        let i = col / 2;
        let freq = libm::pow(10000.0, (2 * i) as f64 / channels as f64);
        let arg = pos as f64 / freq;
        if col % 2 == 0 {
            libm::sin(arg)
        } else {
            libm::cos(arg)
        }
    }))
}

/// Where positional tables are added around a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PosMode {
    None,
    Pre,
    Post,
    /// One table added at both the input and the output.
    #[default]
    Shared,
    /// Separate tables at the input and the output.
    Unshared,
}

impl PosMode {
    pub fn adds_pre(self) -> bool {
        matches!(self, PosMode::Pre | PosMode::Shared | PosMode::Unshared)
    }

    pub fn adds_post(self) -> bool {
        matches!(self, PosMode::Post | PosMode::Shared | PosMode::Unshared)
    }

    /// Number of tables owned per scale.
    pub fn table_count(self) -> usize {
        match self {
            PosMode::None => 0,
            PosMode::Unshared => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosMode::None => "none",
            PosMode::Pre => "pre",
            PosMode::Post => "post",
            PosMode::Shared => "shared",
            PosMode::Unshared => "unshared",
        }
    }
}

impl fmt::Display for PosMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PosMode::None,
            "pre" => PosMode::Pre,
            "post" => PosMode::Post,
            "shared" => PosMode::Shared,
            "unshared" => PosMode::Unshared,
            other => {
                return Err(Error::invalid(
                    "pos_mode",
                    "unknown mode ".to_string() + other,
                ))
            }
        })
    }
}

/// One positional table for one feature scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPositionalEmbedding {
    pub table: Tensor,
    pub scale: usize,
}

impl SharedPositionalEmbedding {
    pub fn new(scale: usize, len: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            table: sinusoidal_init(len, channels)?,
            scale,
        })
    }

    pub fn add_pre(&self, tokens: &Tensor) -> Result<Tensor> {
        add_table(tokens, &self.table)
    }

    pub fn add_post(&self, tokens: &Tensor) -> Result<Tensor> {
        add_table(tokens, &self.table)
    }
}

fn add_table(tokens: &Tensor, table: &Tensor) -> Result<Tensor> {
    if tokens.shape() != table.shape() {
        return Err(Error::ShapeMismatch {
            op: "add_positional",
            expected: table.shape().to_vec(),
            got: tokens.shape().to_vec(),
        });
    }
    let data = tokens
        .data()
        .iter()
        .zip(table.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(tokens.shape(), data)
}

/// Adds an `(L, C)` table to `(B, L, C)` tokens; rejects any other `(L, C)`.
pub fn add_positional(g: &mut Graph, tokens: Var, table: Var) -> Result<Var> {
    let (ts, ps) = (g.shape(tokens), g.shape(table));
    if ts.len() != 3 || ps.len() != 2 || ts[1..] != *ps {
        return Err(Error::ShapeMismatch {
            op: "add_positional",
            expected: ps.to_vec(),
            got: ts.to_vec(),
        });
    }
    g.add(tokens, table)
}
