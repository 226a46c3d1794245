//! SQLite syntax checking, table extraction and normalization.

use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sqlparser::ast::{ObjectName, ObjectNamePart, Query, Statement, Visit, Visitor};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::keywords::Keyword;
use sqlparser::parser::Parser;
use sqlparser::tokenizer::{Token, Tokenizer, Whitespace};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementKind {
    Select,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseVerdict {
    pub ok: bool,
    /// First parser diagnostic; empty iff `ok`.
    pub error_message: String,
    pub statement_kind: StatementKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SQL does not parse: {message}")]
pub struct SqlParseError {
    pub message: String,
}

/// Lowercase base table names referenced by a statement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSet {
    pub names: BTreeSet<String>,
}

impl TableSet {
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(&name.to_lowercase())
    }
}

fn parse(sql: &str) -> Result<Vec<Statement>, SqlParseError> {
    match Parser::parse_sql(&SQLiteDialect {}, sql) {
        Ok(stmts) if stmts.is_empty() => Err(SqlParseError {
            message: "empty statement".into(),
        }),
        Ok(stmts) => Ok(stmts),
        Err(e) => Err(SqlParseError {
            message: e.to_string(),
        }),
    }
}

pub fn syntax_check(sql: &str) -> ParseVerdict {
    match parse(sql) {
        Ok(stmts) => ParseVerdict {
            ok: true,
            error_message: String::new(),
            statement_kind: match stmts[0] {
                Statement::Query(_) => StatementKind::Select,
                _ => StatementKind::Other,
            },
        },
        Err(e) => ParseVerdict {
            ok: false,
            error_message: e.message,
            statement_kind: StatementKind::Other,
        },
    }
}

pub fn is_parseable(sql: &str) -> bool {
    parse(sql).is_ok()
}

#[derive(Default)]
struct RelationCollector {
    ctes: BTreeSet<String>,
    relations: Vec<String>,
}

fn last_part(name: &ObjectName) -> Option<String> {
    match name.0.last()? {
        ObjectNamePart::Identifier(ident) => Some(ident.value.to_lowercase()),
        ObjectNamePart::Function(_) => None,
    }
}

impl Visitor for RelationCollector {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if let Some(with) = &query.with {
            for cte in &with.cte_tables {
                self.ctes.insert(cte.alias.name.value.to_lowercase());
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<()> {
        if let Some(name) = last_part(relation) {
            self.relations.push(name);
        }
        ControlFlow::Continue(())
    }
}

/// Base tables from FROM/JOIN clauses, subqueries and CTE bodies. Aliases
/// never appear; CTE names are excluded; quoting is removed and names are
/// lowercased.
pub fn extract_tables(sql: &str) -> Result<TableSet, SqlParseError> {
    let stmts = parse(sql)?;
    let mut collector = RelationCollector::default();
    let _ = stmts.visit(&mut collector);
    let names = collector
        .relations
        .into_iter()
        .filter(|r| !collector.ctes.contains(r))
        .collect();
    Ok(TableSet { names })
}

static FROM_JOIN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?i)\b(?:from|join)\s+(?:`([^`]+)`|"([^"]+)"|\[([^\]]+)\]|([A-Za-z_][\w$]*(?:\.[A-Za-z_][\w$]*)?))"#,
    )
    .expect("static regex")
});

static CTE_NAME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)(?:\bwith(?:\s+recursive)?|,)\s*[`"\[]?([A-Za-z_][\w$]*)[`"\]]?\s*(?:\([^)]*\)\s*)?as\s*\("#)
        .expect("static regex")
});

/// AST extraction when the SQL parses, otherwise a regular-expression scan of
/// FROM/JOIN targets. Never fails.
pub fn extract_tables_lenient(sql: &str) -> TableSet {
    if let Ok(set) = extract_tables(sql) {
        return set;
    }
    let ctes: BTreeSet<String> = CTE_NAME
        .captures_iter(sql)
        .map(|c| c[1].to_lowercase())
        .collect();
    let names = FROM_JOIN
        .captures_iter(sql)
        .filter_map(|c| (1..=4).find_map(|i| c.get(i)).map(|m| m.as_str().to_string()))
        .map(|n| n.rsplit('.').next().unwrap_or(&n).trim().to_lowercase())
        .filter(|n| !n.is_empty() && n != "select" && !ctes.contains(n))
        .collect();
    TableSet { names }
}

fn collapse_whitespace(sql: &str) -> String {
    sql.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn quote_with(value: &str, open: char) -> String {
    let close = match open {
        '[' => ']',
        c => c,
    };
    let mut out = String::with_capacity(value.len() + 2);
    out.push(open);
    for c in value.chars() {
        if c == close && open != '[' {
            out.push(c);
        }
        out.push(c);
    }
    out.push(close);
    out
}

/// Keywords after which an opening parenthesis keeps its leading space.
const SPACED_BEFORE_PAREN: &[Keyword] = &[
    Keyword::AS,
    Keyword::IN,
    Keyword::FROM,
    Keyword::JOIN,
    Keyword::ON,
    Keyword::WHERE,
    Keyword::AND,
    Keyword::OR,
    Keyword::NOT,
    Keyword::EXISTS,
    Keyword::SELECT,
    Keyword::VALUES,
    Keyword::UNION,
    Keyword::ALL,
    Keyword::THEN,
    Keyword::ELSE,
    Keyword::WHEN,
    Keyword::HAVING,
    Keyword::BY,
    Keyword::DISTINCT,
];

enum Piece {
    Word { text: String, keyword: Keyword, quoted: bool },
    LParen,
    RParen,
    Tight(String),
    Other(String),
}

fn render_token(tok: &Token) -> Option<Piece> {
    Some(match tok {
        Token::Whitespace(_) | Token::EOF => return None,
        Token::Word(w) => match w.quote_style {
            Some(q) => Piece::Word {
                text: quote_with(&w.value, q),
                keyword: Keyword::NoKeyword,
                quoted: true,
            },
            None if w.keyword != Keyword::NoKeyword => Piece::Word {
                text: w.value.to_uppercase(),
                keyword: w.keyword,
                quoted: false,
            },
            None => Piece::Word {
                text: w.value.clone(),
                keyword: Keyword::NoKeyword,
                quoted: false,
            },
        },
        Token::SingleQuotedString(s) => Piece::Other(quote_with(s, '\'')),
        Token::DoubleQuotedString(s) => Piece::Other(quote_with(s, '"')),
        Token::Number(n, long) => Piece::Other(if *long { format!("{n}L") } else { n.clone() }),
        Token::LParen => Piece::LParen,
        Token::RParen => Piece::RParen,
        Token::Comma | Token::Period | Token::SemiColon => Piece::Tight(tok.to_string()),
        other => Piece::Other(other.to_string()),
    })
}

/// Canonical formatting: comments and redundant whitespace dropped, unquoted
/// keywords uppercased, trailing semicolons stripped. Text that does not
/// parse is only whitespace-collapsed.
pub fn normalize_sql(sql: &str) -> String {
    if !is_parseable(sql) {
        return collapse_whitespace(sql);
    }
    let Ok(tokens) = Tokenizer::new(&SQLiteDialect {}, sql).tokenize() else {
        return collapse_whitespace(sql);
    };
    let mut pieces: Vec<Piece> = tokens.iter().filter_map(render_token).collect();
    while matches!(pieces.last(), Some(Piece::Tight(t)) if t == ";") {
        pieces.pop();
    }
    let mut out = String::new();
    let mut prev: Option<&Piece> = None;
    for piece in &pieces {
        let space = match (prev, piece) {
            (None, _) => false,
            (Some(Piece::LParen), _) => false,
            (Some(Piece::Tight(t)), _) if t == "." => false,
            (_, Piece::RParen) | (_, Piece::Tight(_)) => false,
            (Some(Piece::Word { keyword, quoted, .. }), Piece::LParen) => {
                *quoted || SPACED_BEFORE_PAREN.contains(keyword)
            }
            _ => true,
        };
        if space {
            out.push(' ');
        }
        match piece {
            Piece::Word { text, .. } | Piece::Tight(text) | Piece::Other(text) => out.push_str(text),
            Piece::LParen => out.push('('),
            Piece::RParen => out.push(')'),
        }
        prev = Some(piece);
    }
    out
}

/// SQL carried in a model response: the body of the first fenced code block
/// when there is one, else the whole text, cut after the first statement.
pub fn extract_sql_from_response(response: &str) -> String {
    let body = match response.find("```") {
        Some(start) => {
            let after = &response[start + 3..];
            // Skip an info string such as `sql` on the fence line.
            let after = match after.find('\n') {
                Some(nl) if !after[..nl].trim().contains(' ') => &after[nl + 1..],
                _ => after,
            };
            match after.find("```") {
                Some(end) => &after[..end],
                None => after,
            }
        }
        None => response,
    };
    first_statement(body.trim()).trim().to_string()
}

/// Text up to (excluding) the first top-level semicolon.
pub fn first_statement(sql: &str) -> &str {
    match Tokenizer::new(&SQLiteDialect {}, sql).tokenize_with_location() {
        Ok(tokens) => {
            let mut line_starts = vec![0usize];
            for (i, b) in sql.bytes().enumerate() {
                if b == b'\n' {
                    line_starts.push(i + 1);
                }
            }
            for t in tokens {
                if t.token == Token::SemiColon {
                    let loc = t.span.start;
                    let Some(line_start) = line_starts.get(loc.line.saturating_sub(1) as usize) else {
                        break;
                    };
                    let offset = sql[*line_start..]
                        .char_indices()
                        .nth(loc.column.saturating_sub(1) as usize)
                        .map(|(i, _)| line_start + i)
                        .unwrap_or(sql.len());
                    return &sql[..offset];
                }
            }
            sql
        }
        Err(_) => sql.split(';').next().unwrap_or(sql),
    }
}

/// True when the tokens contain nothing but whitespace and comments.
pub fn is_blank(sql: &str) -> bool {
    match Tokenizer::new(&SQLiteDialect {}, sql).tokenize() {
        Ok(tokens) => tokens
            .iter()
            .all(|t| matches!(t, Token::Whitespace(Whitespace::Space | Whitespace::Newline | Whitespace::Tab | Whitespace::SingleLineComment { .. } | Whitespace::MultiLineComment(_)) | Token::EOF)),
        Err(_) => sql.trim().is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(sql: &str) -> Vec<String> {
        extract_tables(sql).unwrap().names.into_iter().collect()
    }

    #[test]
    fn syntax_verdicts() {
        assert!(syntax_check("SELECT 1").ok);
        assert_eq!(syntax_check("SELECT 1").statement_kind, StatementKind::Select);
        let bad = syntax_check("SELEC 1");
        assert!(!bad.ok);
        assert!(bad.error_message.contains("Line: 1"), "{}", bad.error_message);
        assert!(bad.error_message.contains("Column"), "{}", bad.error_message);
        assert!(syntax_check(
            "SELECT movie_title FROM movies WHERE movie_release_year = 1945 ORDER BY movie_popularity DESC"
        )
        .ok);
        assert!(!syntax_check("").ok);
        assert!(!syntax_check("   ").ok);
        assert_eq!(
            syntax_check("DELETE FROM t").statement_kind,
            StatementKind::Other
        );
    }

    #[test]
    fn tables_resolve_aliases() {
        assert_eq!(names("SELECT a.x FROM t1 a JOIN t2 ON a.id=t2.id"), ["t1", "t2"]);
        assert!(names("SELECT 1").is_empty());
        assert_eq!(
            names("SELECT movie_title FROM movies WHERE movie_release_year = 1945 ORDER BY movie_popularity DESC LIMIT 1"),
            ["movies"]
        );
    }

    #[test]
    fn tables_in_subqueries_and_ctes() {
        assert_eq!(
            names("SELECT name FROM singer WHERE singer_id NOT IN (SELECT singer_id FROM concert)"),
            ["concert", "singer"]
        );
        assert_eq!(
            names("WITH s AS (SELECT movie_id FROM ratings) SELECT T1.movie_title FROM movies AS T1 JOIN s ON s.movie_id = T1.movie_id"),
            ["movies", "ratings"]
        );
        assert_eq!(
            names("SELECT `T1`.`School Name` FROM `frpm` AS T1 JOIN \"Schools\" T2 ON T1.CDSCode = T2.CDSCode"),
            ["frpm", "schools"]
        );
        assert_eq!(names("SELECT * FROM main.Singer"), ["singer"]);
        assert_eq!(names("SELECT x FROM (SELECT x FROM inner_t) AS sub"), ["inner_t"]);
    }

    #[test]
    fn tables_reject_unparseable() {
        assert!(extract_tables("SELEC x FROM t").is_err());
    }

    #[test]
    fn lenient_fallback_uses_regex() {
        let set = extract_tables_lenient("SELEC a FROM t1 JOIN `my table` ON x WHERE y IN (SELECT 1 FROM t3)");
        let v: Vec<_> = set.names.into_iter().collect();
        assert_eq!(v, ["my table", "t1", "t3"]);
        let set = extract_tables_lenient("WITH c AS (SELEC 1 FROM base) SELECT * FROM c");
        assert_eq!(set.names.into_iter().collect::<Vec<_>>(), ["base"]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_sql("select  1 ;"), "SELECT 1");
        assert_eq!(
            normalize_sql("select count(*)\nfrom schools where city='San Joaquin';;"),
            "SELECT COUNT(*) FROM schools WHERE city = 'San Joaquin'"
        );
        assert_eq!(normalize_sql("SELEC   1\n x"), "SELEC 1 x");
        assert_eq!(normalize_sql("SELECT 'it''s' -- note\n"), "SELECT 'it''s'");
        assert_eq!(
            normalize_sql("SELECT `school name` FROM frpm WHERE x IN (1 ,2)"),
            "SELECT `school name` FROM frpm WHERE x IN (1, 2)"
        );
    }

    #[test]
    fn normalize_is_idempotent_on_examples() {
        for s in [
            "SELECT T1.name, count(*) FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id GROUP BY T1.singer_id",
            "SELECT CAST(SUM(x) AS REAL) * 100 / COUNT(*) FROM t WHERE a <> -1",
            "WITH a AS (SELECT 1 AS v) SELECT v FROM a",
        ] {
            let once = normalize_sql(s);
            assert_eq!(normalize_sql(&once), once);
            assert!(syntax_check(&once).ok, "{once}");
            assert_eq!(extract_tables(&once).unwrap(), extract_tables(s).unwrap());
        }
    }

    #[test]
    fn response_extraction() {
        assert_eq!(
            extract_sql_from_response("Here it is:\n```sql\nSELECT 1;\n```\nDone."),
            "SELECT 1"
        );
        assert_eq!(extract_sql_from_response("SELECT 'a;b' FROM t; SELECT 2"), "SELECT 'a;b' FROM t");
        assert_eq!(extract_sql_from_response("  SELECT 3  "), "SELECT 3");
        assert_eq!(extract_sql_from_response("```SELECT 4```"), "SELECT 4");
        assert_eq!(first_statement("SELECT 'é';\nSELECT 2"), "SELECT 'é'");
        assert_eq!(first_statement("SELECT 1\n, 2; x"), "SELECT 1\n, 2");
    }

    #[test]
    fn blank_detection() {
        assert!(is_blank("  -- just a comment\n"));
        assert!(!is_blank("SELECT 1"));
    }

    const BASE: &[&str] = &[
        "SELECT count(*) FROM schools WHERE statustype = 'Active' AND city = 'San Joaquin'",
        "SELECT DISTINCT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.singer_id = T2.singer_id WHERE T2.year = 2014",
        "SELECT city FROM schools GROUP BY city ORDER BY count(*) DESC LIMIT 1",
        "SELECT name FROM singer WHERE singer_id NOT IN (SELECT singer_id FROM concert)",
        "SELECT avg(age) FROM singer WHERE country = 'France'",
    ];

    fn perturb(sql: &str, seed: &[u8]) -> String {
        let mut out = String::new();
        let mut in_string = false;
        for (i, word) in sql.split(' ').enumerate() {
            let s = if in_string { 0 } else { seed[i % seed.len()] };
            in_string ^= word.matches('\'').count() % 2 == 1;
            let w = if s % 3 == 0 && word.chars().all(|c| c.is_ascii_uppercase()) {
                word.to_lowercase()
            } else {
                word.to_string()
            };
            if i > 0 {
                out.push_str(match s % 4 {
                    0 => " ",
                    1 => "  ",
                    2 => "\n",
                    _ => "\t ",
                });
            }
            out.push_str(&w);
        }
        if seed[0] % 2 == 0 {
            out.push_str(" ;");
        }
        out
    }

    proptest! {
        #[test]
        fn formatting_variants_normalize_identically(idx in 0..BASE.len(), a in proptest::collection::vec(any::<u8>(), 1..8), b in proptest::collection::vec(any::<u8>(), 1..8)) {
            let x = perturb(BASE[idx], &a);
            let y = perturb(BASE[idx], &b);
            prop_assert_eq!(normalize_sql(&x), normalize_sql(&y));
        }

        #[test]
        fn normalization_preserves_parseability(idx in 0..BASE.len(), a in proptest::collection::vec(any::<u8>(), 1..8), cut in 0usize..120) {
            let x = perturb(BASE[idx], &a);
            let cut = x.char_indices().map(|(i, _)| i).nth(cut).unwrap_or(x.len());
            let s = &x[..cut];
            prop_assert_eq!(syntax_check(&normalize_sql(s)).ok, syntax_check(s).ok);
            if let Ok(t) = extract_tables(s) {
                prop_assert_eq!(extract_tables(&normalize_sql(s)).unwrap(), t);
            }
        }
    }
}
