//! Architecture composition strings such as
//! `2xC(150x150x64) - MP(75x75x64) - F(8192) - FC(2)`.
//!
//! ```text
//! spec  := stage ("-" stage)*
//! stage := [count "x"] kind "(" dims ")"
//! kind  := C | MP | F | FC          (case-insensitive)
//! dims  := int ("x" int)*
//! ```
//!
//! Whitespace is allowed around `-` and at either end.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The composition string of the lung-ultrasound classifier.
pub const DEFAULT_ARCH: &str = "2xC(150x150x64) - MP(75x75x64) - 2xC(75x75x128) - MP(37x37x128) - \
3xC(37x37x256) - MP(18x18x256) - 3xC(18x18x512) - MP(9x9x512) - 3xC(9x9x512) - MP(4x4x512) - \
F(8192) - FC(2)";

pub const DEFAULT_INPUT_DIMS: [usize; 3] = [150, 150, 1];
pub const CLASS_LABELS: [&str; 2] = ["covid", "healthy"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Flatten,
    FullConnection,
}

impl LayerKind {
    pub fn symbol(self) -> &'static str {
        match self {
            Self::Conv => "C",
            Self::MaxPool => "MP",
            Self::Flatten => "F",
            Self::FullConnection => "FC",
        }
    }

    /// Prefix used in layer and parameter names.
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::MaxPool => "pool",
            Self::Flatten => "flatten",
            Self::FullConnection => "fc",
        }
    }

    fn annotated_rank(self) -> usize {
        match self {
            Self::Conv | Self::MaxPool => 3,
            Self::Flatten | Self::FullConnection => 1,
        }
    }

    fn from_symbol(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C" => Some(Self::Conv),
            "MP" => Some(Self::MaxPool),
            "F" => Some(Self::Flatten),
            "FC" => Some(Self::FullConnection),
            _ => None,
        }
    }
}

/// One stage of the composition string, before repeat expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub repeat: usize,
    pub annotated_dims: Vec<usize>,
}

impl LayerSpec {
    /// Output channels for Conv/MaxPool, units for Flatten/FullConnection.
    pub fn width(&self) -> usize {
        *self.annotated_dims.last().expect("annotated dims are nonempty")
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.repeat > 1 {
            write!(f, "{}x", self.repeat)?;
        }
        let dims: Vec<String> = self.annotated_dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}({})", self.kind.symbol(), dims.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dims: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_labels: Vec<String>,
}

impl NetworkSpec {
    pub fn new(input_dims: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_dims,
            layers,
            class_labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_input_dims(mut self, dims: Vec<usize>) -> Self {
        self.input_dims = dims;
        self
    }

    /// Canonical form: single spaces around `-`, uppercase kinds, no `1x`.
    pub fn render(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" - ")
    }

    /// Number of layers after repeat expansion.
    pub fn expanded_len(&self) -> usize {
        self.layers.iter().map(|l| l.repeat).sum()
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.repeat).sum()
    }
}

impl std::str::FromStr for NetworkSpec {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_arch(s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            offset,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn int(&mut self) -> Result<(usize, usize), ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err(start, "expected integer");
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match text.parse::<usize>() {
            Ok(v) => Ok((v, start)),
            Err(_) => self.err(start, format!("integer {text} out of range")),
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), ParseError> {
        match self.peek() {
            Some(b) if b == byte => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => self.err(self.pos, format!("expected '{}', found '{}'", byte as char, b as char)),
            None => self.err(self.pos, format!("expected '{}', found end of input", byte as char)),
        }
    }

    fn is_x(b: Option<u8>) -> bool {
        matches!(b, Some(b'x') | Some(b'X'))
    }

    fn stage(&mut self) -> Result<LayerSpec, ParseError> {
        let mut repeat = 1;
        if self.peek().is_some_and(|b| b.is_ascii_digit()) {
            let (n, at) = self.int()?;
            if n == 0 {
                return self.err(at, "repeat count must be positive");
            }
            if !Self::is_x(self.peek()) {
                return self.err(self.pos, "expected 'x' after repeat count");
            }
            self.pos += 1;
            repeat = n;
        }
        let kind_start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_alphabetic()) {
            self.pos += 1;
        }
        if kind_start == self.pos {
            return self.err(kind_start, "expected layer kind");
        }
        let sym = std::str::from_utf8(&self.src[kind_start..self.pos]).unwrap();
        let kind = match LayerKind::from_symbol(sym) {
            Some(k) => k,
            None => return self.err(kind_start, format!("unknown kind {sym}")),
        };
        self.expect(b'(')?;
        let dims_start = self.pos;
        let mut dims = Vec::new();
        loop {
            let (d, at) = self.int()?;
            if d == 0 {
                return self.err(at, "dimension must be positive");
            }
            dims.push(d);
            if Self::is_x(self.peek()) {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.expect(b')')?;
        if dims.len() != kind.annotated_rank() {
            return self.err(
                dims_start,
                format!(
                    "{} expects {} annotated dims, found {}",
                    kind.symbol(),
                    kind.annotated_rank(),
                    dims.len()
                ),
            );
        }
        Ok(LayerSpec {
            kind,
            repeat,
            annotated_dims: dims,
        })
    }
}

/// Parses a composition string.
///
/// The input dims default to `(H, W, 1)` taken from a leading conv stage,
/// or `(150, 150, 1)` otherwise; use [`NetworkSpec::with_input_dims`] to
/// override.
pub fn parse_arch(text: &str) -> Result<NetworkSpec, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let mut layers = Vec::new();
    p.skip_ws();
    loop {
        layers.push(p.stage()?);
        p.skip_ws();
        match p.peek() {
            None => break,
            Some(b'-') => {
                p.pos += 1;
                p.skip_ws();
            }
            Some(b) => return p.err(p.pos, format!("expected '-' between stages, found '{}'", b as char)),
        }
    }
    let input_dims = match layers.first() {
        Some(l) if l.kind == LayerKind::Conv => vec![l.annotated_dims[0], l.annotated_dims[1], 1],
        _ => DEFAULT_INPUT_DIMS.to_vec(),
    };
    Ok(NetworkSpec::new(input_dims, layers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_string_structure() {
        let spec = parse_arch(DEFAULT_ARCH).unwrap();
        assert_eq!(spec.layers.len(), 12);
        assert_eq!(spec.expanded_len(), 20);
        assert_eq!(spec.count_kind(LayerKind::Conv), 13);
        assert_eq!(spec.count_kind(LayerKind::MaxPool), 5);
        assert_eq!(spec.count_kind(LayerKind::Flatten), 1);
        assert_eq!(spec.count_kind(LayerKind::FullConnection), 1);
        assert_eq!(spec.input_dims, vec![150, 150, 1]);
        let last = spec.layers.last().unwrap();
        assert_eq!((last.kind, last.width()), (LayerKind::FullConnection, 2));
        assert_eq!(spec.class_labels, vec!["covid", "healthy"]);
        assert_eq!(spec.render(), DEFAULT_ARCH);
    }

    #[test]
    fn minimal_fc() {
        let spec = parse_arch("FC(2)").unwrap();
        assert_eq!(
            spec.layers,
            vec![LayerSpec {
                kind: LayerKind::FullConnection,
                repeat: 1,
                annotated_dims: vec![2]
            }]
        );
    }

    #[test]
    fn unknown_kind_message() {
        let err = parse_arch("2xQ(3x3x3)").unwrap_err();
        assert_eq!(err.offset, 2);
        assert_eq!(err.to_string(), "unknown kind Q at offset 2");
    }

    #[test]
    fn canonicalizes_spacing_and_case() {
        let spec = parse_arch("  1xc(8x8x4)-mp(4x4x4)   -  f(64) -fc(2) ").unwrap();
        assert_eq!(spec.render(), "C(8x8x4) - MP(4x4x4) - F(64) - FC(2)");
        assert_eq!(spec.input_dims, vec![8, 8, 1]);
    }

    #[test]
    fn rejections() {
        assert_eq!(parse_arch("C(0x3x3)").unwrap_err().offset, 2);
        assert!(parse_arch("0xC(3x3x3)").is_err());
        assert!(parse_arch("C(3x3)").is_err());
        assert!(parse_arch("FC(2) FC(2)").is_err());
        assert!(parse_arch("FC(2) -").is_err());
        assert!(parse_arch("").is_err());
        assert!(parse_arch("2C(3x3x3)").is_err());
        assert!(parse_arch("FC(2").is_err());
    }
}
