//! Tokenizer and tree builder for the relaxed declaration syntax.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::DeclarationError;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Value {
    /// Quoted string or bare word.
    Str(String),
    Number(String),
    Bool(bool),
    Null,
    Object(Vec<Member>),
    Array(Vec<Node>),
}

impl Value {
    pub(crate) fn type_name(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Number(_) => "number",
            Value::Bool(_) => "boolean",
            Value::Null => "null",
            Value::Object(_) => "object",
            Value::Array(_) => "array",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Node {
    pub value: Value,
    pub line: usize,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Member {
    pub key: String,
    pub value: Node,
}

/// Parses a whole document. The outer braces are optional.
pub(crate) fn parse_document(text: &str) -> Result<Vec<Member>, DeclarationError> {
    let mut p = Parser { src: text.as_bytes(), text, pos: 0, line: 1, col: 1 };
    p.skip_trivia()?;
    let members = if p.peek() == Some(b'{') {
        p.bump();
        p.members(Some(b'}'))?
    } else {
        p.members(None)?
    };
    p.skip_trivia()?;
    if p.peek().is_some() {
        return Err(p.error("unexpected content after document"));
    }
    Ok(members)
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    line: usize,
    col: usize,
}

fn is_bare(b: u8) -> bool {
    !matches!(b, b'{' | b'}' | b'[' | b']' | b':' | b'=' | b',' | b';' | b'"' | b'\'' | b'#')
        && !b.is_ascii_whitespace()
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<u8> {
        self.src.get(self.pos + offset).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.col = 1;
        } else if b & 0xC0 != 0x80 {
            self.col += 1;
        }
        Some(b)
    }

    fn error(&self, message: &str) -> DeclarationError {
        DeclarationError::Syntax { line: self.line, column: self.col, message: message.to_string() }
    }

    fn skip_trivia(&mut self) -> Result<(), DeclarationError> {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'#') => self.skip_line(),
                Some(b'/') if self.peek_at(1) == Some(b'/') => self.skip_line(),
                Some(b'/') if self.peek_at(1) == Some(b'*') => {
                    let (line, col) = (self.line, self.col);
                    self.bump();
                    self.bump();
                    loop {
                        match self.bump() {
                            Some(b'*') if self.peek() == Some(b'/') => {
                                self.bump();
                                break;
                            }
                            Some(_) => {}
                            None => {
                                return Err(DeclarationError::Syntax {
                                    line,
                                    column: col,
                                    message: "unterminated comment".to_string(),
                                })
                            }
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn skip_line(&mut self) {
        while let Some(b) = self.peek() {
            if b == b'\n' {
                break;
            }
            self.bump();
        }
    }

    fn members(&mut self, close: Option<u8>) -> Result<Vec<Member>, DeclarationError> {
        let mut members = Vec::new();
        loop {
            self.skip_trivia()?;
            match (self.peek(), close) {
                (None, None) => return Ok(members),
                (None, Some(_)) => return Err(self.error("unexpected end of input, expected '}'")),
                (Some(b), Some(c)) if b == c => {
                    self.bump();
                    return Ok(members);
                }
                _ => {}
            }
            let key = self.key()?;
            self.skip_trivia()?;
            if matches!(self.peek(), Some(b':') | Some(b'=')) {
                self.bump();
                self.skip_trivia()?;
            }
            let value = self.value()?;
            members.push(Member { key, value });
            self.skip_trivia()?;
            if matches!(self.peek(), Some(b',') | Some(b';')) {
                self.bump();
            }
        }
    }

    fn key(&mut self) -> Result<String, DeclarationError> {
        match self.peek() {
            Some(q @ (b'"' | b'\'')) => self.quoted(q),
            Some(b) if is_bare(b) => Ok(self.bare_word().to_string()),
            _ => Err(self.error("expected a key")),
        }
    }

    fn value(&mut self) -> Result<Node, DeclarationError> {
        let (line, column) = (self.line, self.col);
        let value = match self.peek() {
            Some(b'{') => {
                self.bump();
                Value::Object(self.members(Some(b'}'))?)
            }
            Some(b'[') => {
                self.bump();
                Value::Array(self.array()?)
            }
            Some(q @ (b'"' | b'\'')) => Value::Str(self.quoted(q)?),
            Some(b) if is_bare(b) => classify(self.bare_word()),
            Some(_) => return Err(self.error("expected a value")),
            None => return Err(self.error("unexpected end of input, expected a value")),
        };
        Ok(Node { value, line, column })
    }

    fn array(&mut self) -> Result<Vec<Node>, DeclarationError> {
        let mut items = Vec::new();
        loop {
            self.skip_trivia()?;
            match self.peek() {
                Some(b']') => {
                    self.bump();
                    return Ok(items);
                }
                None => return Err(self.error("unexpected end of input, expected ']'")),
                _ => {}
            }
            items.push(self.value()?);
            self.skip_trivia()?;
            if self.peek() == Some(b',') {
                self.bump();
            }
        }
    }

    fn bare_word(&mut self) -> &'a str {
        let start = self.pos;
        while let Some(b) = self.peek() {
            // `//` and `/*` start comments even inside a bare word.
            if !is_bare(b) || (b == b'/' && matches!(self.peek_at(1), Some(b'/') | Some(b'*'))) {
                break;
            }
            self.bump();
        }
        &self.text[start..self.pos]
    }

    fn quoted(&mut self, quote: u8) -> Result<String, DeclarationError> {
        let (line, column) = (self.line, self.col);
        self.bump();
        let mut out = String::new();
        let mut run_start = self.pos;
        loop {
            let Some(b) = self.peek() else {
                return Err(DeclarationError::Syntax { line, column, message: "unterminated string".to_string() });
            };
            if b == quote {
                out.push_str(&self.text[run_start..self.pos]);
                self.bump();
                return Ok(out);
            }
            match b {
                b'\\' => {
                    out.push_str(&self.text[run_start..self.pos]);
                    self.bump();
                    self.escape(&mut out)?;
                    run_start = self.pos;
                }
                b'\n' | b'\r' => {
                    return Err(DeclarationError::Syntax { line, column, message: "unterminated string".to_string() })
                }
                b if b < 0x20 && b != b'\t' => {
                    return Err(self.error("control character in string"));
                }
                _ => {
                    self.bump();
                }
            }
        }
    }

    fn escape(&mut self, out: &mut String) -> Result<(), DeclarationError> {
        let c = match self.bump() {
            Some(b'"') => '"',
            Some(b'\'') => '\'',
            Some(b'\\') => '\\',
            Some(b'/') => '/',
            Some(b'b') => '\u{8}',
            Some(b'f') => '\u{c}',
            Some(b'n') => '\n',
            Some(b'r') => '\r',
            Some(b't') => '\t',
            Some(b'u') => {
                let hi = self.hex4()?;
                let code = if (0xD800..0xDC00).contains(&hi) {
                    if self.bump() != Some(b'\\') || self.bump() != Some(b'u') {
                        return Err(self.error("unpaired surrogate in \\u escape"));
                    }
                    let lo = self.hex4()?;
                    if !(0xDC00..0xE000).contains(&lo) {
                        return Err(self.error("unpaired surrogate in \\u escape"));
                    }
                    0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
                } else {
                    hi
                };
                char::from_u32(code).ok_or_else(|| self.error("invalid \\u escape"))?
            }
            _ => return Err(self.error("invalid escape sequence")),
        };
        out.push(c);
        Ok(())
    }

    fn hex4(&mut self) -> Result<u32, DeclarationError> {
        let mut v = 0u32;
        for _ in 0..4 {
            let d =
                self.bump().and_then(|b| (b as char).to_digit(16)).ok_or_else(|| self.error("invalid \\u escape"))?;
            v = v * 16 + d;
        }
        Ok(v)
    }
}

fn classify(word: &str) -> Value {
    match word {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        "null" => Value::Null,
        _ if looks_numeric(word) => Value::Number(word.to_string()),
        _ => Value::Str(word.to_string()),
    }
}

fn looks_numeric(word: &str) -> bool {
    let digits = word.strip_prefix('-').unwrap_or(word);
    digits.starts_with(|c: char| c.is_ascii_digit())
        && digits.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'))
}
