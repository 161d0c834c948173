//! Character-level reference tokenizer with reserved `[MASK]` and `[EOA]`
//! atoms. Needs no external assets and round-trips exactly over its alphabet
//! (printable ASCII plus newline).

use super::{LmError, TokenSequence, END_TOKEN, MASK_TOKEN};

/// Reserved ids come first, then `\n`, then printable ASCII in code order.
pub const END_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
const NEWLINE_ID: u32 = 2;
const CHAR_BASE: u32 = 3;
const FIRST_CHAR: u32 = 0x20; // ' '
const LAST_CHAR: u32 = 0x7e; // '~'

#[derive(Debug, Clone, Default)]
pub struct CharTokenizer;

impl CharTokenizer {
    pub const VOCAB_SIZE: usize = (CHAR_BASE + LAST_CHAR - FIRST_CHAR + 1) as usize;

    pub fn new() -> Self {
        CharTokenizer
    }

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        let mut index = 0usize;
        while !rest.is_empty() {
            if rest.starts_with(MASK_TOKEN) {
                ids.push(MASK_ID);
                rest = &rest[MASK_TOKEN.len()..];
                index += MASK_TOKEN.len();
                continue;
            }
            let ch = rest.chars().next().expect("nonempty");
            ids.push(self.char_id(ch, index)?);
            rest = &rest[ch.len_utf8()..];
            index += ch.len_utf8();
        }
        Ok(TokenSequence::new(ids))
    }

    pub fn detokenize(&self, tokens: &TokenSequence) -> String {
        let mut out = String::new();
        for &id in tokens.ids() {
            match id {
                END_ID => out.push_str(END_TOKEN),
                MASK_ID => out.push_str(MASK_TOKEN),
                NEWLINE_ID => out.push('\n'),
                _ => {
                    let code = FIRST_CHAR + (id - CHAR_BASE);
                    out.push(char::from_u32(code).expect("ascii id"));
                }
            }
        }
        out
    }

    fn char_id(&self, ch: char, index: usize) -> Result<u32, LmError> {
        if ch == '\n' {
            return Ok(NEWLINE_ID);
        }
        let code = ch as u32;
        if (FIRST_CHAR..=LAST_CHAR).contains(&code) {
            Ok(CHAR_BASE + code - FIRST_CHAR)
        } else {
            Err(LmError::UnsupportedChar { ch, index })
        }
    }
}
