use super::MigrateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Number,
    /// Single-quoted string literal, quotes included.
    String,
    /// Double-quoted identifier (or SQLite's double-quoted literal).
    QuotedIdent,
    Backtick,
    /// SQLite's `[name]` identifier quoting.
    Bracket,
    Param,
    Symbol,
    Whitespace,
    Comment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
}

impl Token {
    pub fn new(kind: TokenKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into() }
    }

    pub fn word(text: &str) -> Self {
        Self::new(TokenKind::Word, text)
    }

    pub fn sym(text: &str) -> Self {
        Self::new(TokenKind::Symbol, text)
    }

    pub fn space() -> Self {
        Self::new(TokenKind::Whitespace, " ")
    }

    /// Single-quoted literal with `'` escaped by doubling.
    pub fn string(content: &str) -> Self {
        Self::new(TokenKind::String, format!("'{}'", content.replace('\'', "''")))
    }

    pub fn quoted_ident(name: &str) -> Self {
        Self::new(TokenKind::QuotedIdent, format!("\"{}\"", name.replace('"', "\"\"")))
    }

    pub fn is_word(&self, w: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(w)
    }

    pub fn is_sym(&self, s: &str) -> bool {
        self.kind == TokenKind::Symbol && self.text == s
    }

    pub fn is_trivia(&self) -> bool {
        matches!(self.kind, TokenKind::Whitespace | TokenKind::Comment)
    }

    /// Content of a quoted token with the quoting removed.
    pub fn unquoted(&self) -> String {
        let t = &self.text;
        match self.kind {
            TokenKind::String => t[1..t.len() - 1].replace("''", "'"),
            TokenKind::QuotedIdent => t[1..t.len() - 1].replace("\"\"", "\""),
            TokenKind::Backtick => t[1..t.len() - 1].replace("``", "`"),
            TokenKind::Bracket => t[1..t.len() - 1].to_string(),
            _ => t.clone(),
        }
    }

    /// Identifier name for words and any quoted identifier form.
    pub fn ident_name(&self) -> Option<String> {
        match self.kind {
            TokenKind::Word => Some(self.text.clone()),
            TokenKind::QuotedIdent | TokenKind::Backtick | TokenKind::Bracket => Some(self.unquoted()),
            _ => None,
        }
    }
}

const MULTI_SYMBOLS: [&str; 11] = ["->>", "||", "<=", ">=", "<>", "!=", "==", "<<", ">>", "->", "::"];

/// Splits SQL into tokens whose texts concatenate back to the input.
pub fn tokenize(sql: &str) -> Result<Vec<Token>, MigrateError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let take = |from: usize, to: usize| chars[from..to].iter().collect::<String>();
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        let kind = if c.is_whitespace() {
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            TokenKind::Whitespace
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            TokenKind::Comment
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            loop {
                if i + 1 >= chars.len() {
                    return Err(MigrateError::TokenizeFailed {
                        offset: start,
                        reason: "unterminated block comment".into(),
                    });
                }
                if chars[i] == '*' && chars[i + 1] == '/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
            TokenKind::Comment
        } else if matches!(c, '\'' | '"' | '`') {
            i = scan_quoted(&chars, i, c).ok_or_else(|| MigrateError::TokenizeFailed {
                offset: start,
                reason: format!("unterminated {c} quote"),
            })?;
            match c {
                '\'' => TokenKind::String,
                '"' => TokenKind::QuotedIdent,
                _ => TokenKind::Backtick,
            }
        } else if c == '[' {
            match chars[i..].iter().position(|&x| x == ']') {
                Some(p) => i += p + 1,
                None => {
                    return Err(MigrateError::TokenizeFailed {
                        offset: start,
                        reason: "unterminated [ identifier".into(),
                    })
                }
            }
            TokenKind::Bracket
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            i = scan_number(&chars, i);
            TokenKind::Number
        } else if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            TokenKind::Word
        } else if matches!(c, '?' | ':' | '@' | '$')
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric() || n == &'_')
            && !(c == ':' && chars.get(i + 1) == Some(&':'))
        {
            i += 1;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            TokenKind::Param
        } else if c == '?' {
            i += 1;
            TokenKind::Param
        } else {
            let rest = take(i, (i + 3).min(chars.len()));
            let len = MULTI_SYMBOLS.iter().find(|s| rest.starts_with(*s)).map_or(1, |s| s.chars().count());
            i += len;
            TokenKind::Symbol
        };
        out.push(Token::new(kind, take(start, i)));
    }
    Ok(out)
}

fn scan_quoted(chars: &[char], start: usize, q: char) -> Option<usize> {
    let mut i = start + 1;
    while i < chars.len() {
        if chars[i] == q {
            if chars.get(i + 1) == Some(&q) {
                i += 2;
                continue;
            }
            return Some(i + 1);
        }
        i += 1;
    }
    None
}

fn scan_number(chars: &[char], start: usize) -> usize {
    let mut i = start;
    if chars[i] == '0' && matches!(chars.get(i + 1), Some('x' | 'X')) {
        i += 2;
        while i < chars.len() && chars[i].is_ascii_hexdigit() {
            i += 1;
        }
        return i;
    }
    while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
        i += 1;
    }
    if matches!(chars.get(i), Some('e' | 'E')) {
        let mut j = i + 1;
        if matches!(chars.get(j), Some('+' | '-')) {
            j += 1;
        }
        if chars.get(j).is_some_and(|d| d.is_ascii_digit()) {
            i = j;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    i
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.text.as_str()).collect()
}

/// Index of the next non-trivia token at or after `from`.
pub fn next_sig(tokens: &[Token], from: usize) -> Option<usize> {
    (from..tokens.len()).find(|&i| !tokens[i].is_trivia())
}

/// Index of the previous non-trivia token strictly before `before`.
pub fn prev_sig(tokens: &[Token], before: usize) -> Option<usize> {
    (0..before).rev().find(|&i| !tokens[i].is_trivia())
}

/// Index of the `)` matching the `(` at `open`.
pub fn matching_paren(tokens: &[Token], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        if t.is_sym("(") {
            depth += 1;
        } else if t.is_sym(")") {
            depth -= 1;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}

/// Token ranges of the top-level comma-separated items between `open` and
/// `close` (exclusive), with surrounding trivia trimmed.
pub fn split_args(tokens: &[Token], open: usize, close: usize) -> Vec<(usize, usize)> {
    let mut args = Vec::new();
    let mut depth = 0usize;
    let mut start = open + 1;
    for i in open + 1..close {
        let t = &tokens[i];
        if t.is_sym("(") {
            depth += 1;
        } else if t.is_sym(")") {
            depth = depth.saturating_sub(1);
        } else if t.is_sym(",") && depth == 0 {
            args.push(trim(tokens, start, i));
            start = i + 1;
        }
    }
    if start < close || !args.is_empty() {
        args.push(trim(tokens, start, close));
    }
    args
}

fn trim(tokens: &[Token], mut s: usize, mut e: usize) -> (usize, usize) {
    while s < e && tokens[s].is_trivia() {
        s += 1;
    }
    while e > s && tokens[e - 1].is_trivia() {
        e -= 1;
    }
    (s, e)
}

/// Call sites `NAME (` for a function name, returning `(name_idx, open_idx)`.
pub fn find_call(tokens: &[Token], from: usize, name: &str) -> Option<(usize, usize)> {
    let mut i = from;
    while i < tokens.len() {
        if tokens[i].is_word(name) {
            let qualified = prev_sig(tokens, i).is_some_and(|p| tokens[p].is_sym("."));
            if let Some(open) = next_sig(tokens, i + 1) {
                if tokens[open].is_sym("(") && !qualified {
                    return Some((i, open));
                }
            }
        }
        i += 1;
    }
    None
}
