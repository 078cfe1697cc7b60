//! Gold table/column sets recovered from reference SQL.
//!
//! Works on the token stream rather than a full parse so that dialect quirks in
//! benchmark SQL (backticks, bracket quoting, `IIF`, ...) do not matter. Every
//! parenthesised group opens a scope; names bound in `FROM`/`JOIN` are visible
//! in that scope and the scopes nested in it.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::keywords::Keyword;
use sqlparser::tokenizer::{Token, Tokenizer, Word};
use tracing::debug;

use super::LinkingError;
use crate::catalog::SchemaCatalog;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLinking {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<(String, String)>,
}

impl GoldLinking {
    pub fn table_set(&self) -> HashSet<String> {
        self.tables.iter().map(|t| t.to_lowercase()).collect()
    }

    pub fn column_set(&self) -> HashSet<(String, String)> {
        self.columns
            .iter()
            .map(|(t, c)| (t.to_lowercase(), c.to_lowercase()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Binding {
    Table(String),
    Derived,
}

#[derive(Debug, Default)]
struct Scope {
    parent: Option<usize>,
    bindings: HashMap<String, Binding>,
    tables: Vec<String>,
    has_derived: bool,
}

const STRUCTURAL: &[Keyword] = &[
    Keyword::SELECT,
    Keyword::FROM,
    Keyword::WHERE,
    Keyword::GROUP,
    Keyword::BY,
    Keyword::ORDER,
    Keyword::HAVING,
    Keyword::LIMIT,
    Keyword::OFFSET,
    Keyword::AS,
    Keyword::ON,
    Keyword::USING,
    Keyword::JOIN,
    Keyword::INNER,
    Keyword::LEFT,
    Keyword::RIGHT,
    Keyword::OUTER,
    Keyword::CROSS,
    Keyword::NATURAL,
    Keyword::AND,
    Keyword::OR,
    Keyword::NOT,
    Keyword::IN,
    Keyword::IS,
    Keyword::NULL,
    Keyword::LIKE,
    Keyword::BETWEEN,
    Keyword::CASE,
    Keyword::WHEN,
    Keyword::THEN,
    Keyword::ELSE,
    Keyword::END,
    Keyword::DISTINCT,
    Keyword::ALL,
    Keyword::ASC,
    Keyword::DESC,
    Keyword::UNION,
    Keyword::INTERSECT,
    Keyword::EXCEPT,
    Keyword::EXISTS,
    Keyword::WITH,
];

fn is_keyword(w: &Word) -> bool {
    w.quote_style.is_none() && w.keyword != Keyword::NoKeyword
}

fn is_structural(w: &Word) -> bool {
    w.quote_style.is_none() && STRUCTURAL.contains(&w.keyword)
}

fn unresolvable(identifier: &str, reason: impl Into<String>) -> LinkingError {
    LinkingError::Unresolvable {
        identifier: identifier.to_string(),
        reason: reason.into(),
    }
}

struct Resolver<'a> {
    catalog: &'a SchemaCatalog,
    tokens: Vec<Token>,
    scope_of: Vec<usize>,
    scopes: Vec<Scope>,
    /// Token positions already accounted for (table names, aliases, qualifiers).
    consumed: HashSet<usize>,
    /// `(position, scope)` of `SELECT *`.
    stars: Vec<(usize, usize)>,
    output_aliases: HashSet<String>,
}

impl<'a> Resolver<'a> {
    fn new(sql: &str, catalog: &'a SchemaCatalog) -> Result<Self, LinkingError> {
        let tokens = Tokenizer::new(&SQLiteDialect {}, sql)
            .tokenize()
            .map_err(|e| unresolvable(sql, format!("tokenizer: {e}")))?
            .into_iter()
            .filter(|t| !matches!(t, Token::Whitespace(_)))
            .collect::<Vec<_>>();
        Ok(Self {
            catalog,
            scope_of: Vec::with_capacity(tokens.len()),
            tokens,
            scopes: vec![Scope::default()],
            consumed: HashSet::new(),
            stars: Vec::new(),
            output_aliases: HashSet::new(),
        })
    }

    fn word(&self, i: usize) -> Option<&Word> {
        match self.tokens.get(i) {
            Some(Token::Word(w)) => Some(w),
            _ => None,
        }
    }

    fn catalog_table(&self, name: &str) -> Option<String> {
        self.catalog.table(name).map(|t| t.name.clone())
    }

    fn new_scope(&mut self, parent: Option<usize>) -> usize {
        self.scopes.push(Scope {
            parent,
            ..Scope::default()
        });
        self.scopes.len() - 1
    }

    /// Binds an optional alias following position `i`; returns the next
    /// unread position.
    fn bind_alias(&mut self, mut i: usize, scope: usize, binding: &Binding) -> usize {
        let mut explicit = false;
        if self.word(i).is_some_and(|w| w.quote_style.is_none() && w.keyword == Keyword::AS) {
            explicit = true;
            i += 1;
        }
        if let Some(w) = self.word(i) {
            if explicit || !is_keyword(w) {
                let alias = w.value.to_lowercase();
                self.consumed.insert(i);
                self.scopes[scope].bindings.insert(alias, binding.clone());
                return i + 1;
            }
        }
        if explicit {
            // dangling AS
            return i;
        }
        i
    }

    /// First pass: scopes, table references, aliases and stars.
    fn collect(&mut self) {
        let mut stack = vec![0usize];
        // expecting a table reference in the current scope
        let mut expect_table: Vec<bool> = vec![false];
        let mut in_from: Vec<bool> = vec![false];
        // set when a parenthesised group in table position closes
        let mut derived_close: Option<usize> = None;
        let mut derived_open: Vec<bool> = vec![false];
        let mut i = 0;
        while i < self.tokens.len() {
            let scope = *stack.last().unwrap();
            while self.scope_of.len() <= i {
                self.scope_of.push(scope);
            }
            let depth = stack.len() - 1;
            if derived_close.take() == Some(i) {
                self.scopes[scope].has_derived = true;
                let next = self.bind_alias(i, scope, &Binding::Derived);
                if next != i {
                    i = next;
                    continue;
                }
            }
            match self.tokens[i].clone() {
                Token::LParen => {
                    let opens_derived = expect_table[depth];
                    expect_table[depth] = false;
                    let child = self.new_scope(Some(scope));
                    stack.push(child);
                    expect_table.push(false);
                    in_from.push(false);
                    derived_open.push(opens_derived);
                }
                Token::RParen => {
                    if stack.len() > 1 {
                        stack.pop();
                        expect_table.pop();
                        in_from.pop();
                        if derived_open.pop() == Some(true) {
                            derived_close = Some(i + 1);
                        }
                    }
                }
                Token::Comma if in_from[depth] => expect_table[depth] = true,
                Token::Mul => {
                    let prev = i.checked_sub(1).and_then(|p| self.word(p));
                    if prev.is_some_and(|w| {
                        w.quote_style.is_none() && matches!(w.keyword, Keyword::SELECT | Keyword::DISTINCT | Keyword::ALL)
                    }) {
                        self.stars.push((i, scope));
                    }
                }
                Token::Word(w) => {
                    let kw = if w.quote_style.is_none() { w.keyword } else { Keyword::NoKeyword };
                    match kw {
                        Keyword::FROM | Keyword::JOIN => {
                            in_from[depth] = true;
                            expect_table[depth] = true;
                        }
                        Keyword::UNION | Keyword::INTERSECT | Keyword::EXCEPT => {
                            let parent = self.scopes[scope].parent;
                            let sibling = self.new_scope(parent);
                            *stack.last_mut().unwrap() = sibling;
                            in_from[depth] = false;
                            expect_table[depth] = false;
                            self.scope_of[i] = sibling;
                        }
                        Keyword::AS if !expect_table[depth] => {
                            if let Some(next) = self.word(i + 1) {
                                if !is_keyword(next) {
                                    self.output_aliases.insert(next.value.to_lowercase());
                                }
                            }
                        }
                        Keyword::NoKeyword if expect_table[depth] => {
                            expect_table[depth] = false;
                            self.consumed.insert(i);
                            let binding = match self.catalog_table(&w.value) {
                                Some(name) => {
                                    self.scopes[scope].tables.push(name.clone());
                                    Binding::Table(name)
                                }
                                None => {
                                    self.scopes[scope].has_derived = true;
                                    Binding::Derived
                                }
                            };
                            self.scopes[scope].bindings.insert(w.value.to_lowercase(), binding.clone());
                            i = self.bind_alias(i + 1, scope, &binding);
                            continue;
                        }
                        Keyword::NoKeyword => {}
                        _ if expect_table[depth] => {
                            // a keyword-named table is still a table reference
                            if let Some(name) = self.catalog_table(&w.value) {
                                expect_table[depth] = false;
                                self.consumed.insert(i);
                                self.scopes[scope].tables.push(name.clone());
                                let binding = Binding::Table(name);
                                self.scopes[scope].bindings.insert(w.value.to_lowercase(), binding.clone());
                                i = self.bind_alias(i + 1, scope, &binding);
                                continue;
                            }
                        }
                        _ => in_from[depth] = false,
                    }
                }
                _ => {}
            }
            i += 1;
        }
        let last = *stack.last().unwrap();
        while self.scope_of.len() < self.tokens.len() {
            self.scope_of.push(last);
        }
    }

    fn lookup_binding(&self, mut scope: usize, name: &str) -> Option<&Binding> {
        let key = name.to_lowercase();
        loop {
            if let Some(b) = self.scopes[scope].bindings.get(&key) {
                return Some(b);
            }
            scope = self.scopes[scope].parent?;
        }
    }

    fn chain_has_derived(&self, mut scope: usize) -> bool {
        loop {
            if self.scopes[scope].has_derived {
                return true;
            }
            match self.scopes[scope].parent {
                Some(p) => scope = p,
                None => return false,
            }
        }
    }

    fn resolve_unqualified(&self, mut scope: usize, column: &str) -> Result<Option<(String, String)>, String> {
        loop {
            let owners: Vec<(String, String)> = self.scopes[scope]
                .tables
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter_map(|t| {
                    let table = self.catalog.table(t)?;
                    table.column(column).map(|c| (table.name.clone(), c.name.clone()))
                })
                .collect();
            match owners.len() {
                1 => return Ok(owners.into_iter().next()),
                0 => {}
                _ => {
                    let names: Vec<_> = owners.into_iter().map(|(t, _)| t).collect();
                    return Err(format!("ambiguous between {}", names.join(", ")));
                }
            }
            match self.scopes[scope].parent {
                Some(p) => scope = p,
                None => return Ok(None),
            }
        }
    }

    /// Second pass: column references and star expansion.
    fn resolve(self) -> Result<GoldLinking, LinkingError> {
        let mut gold = GoldLinking::default();
        for scope in &self.scopes {
            gold.tables.extend(scope.tables.iter().cloned());
        }
        for &(_, scope) in &self.stars {
            for t in &self.scopes[scope].tables {
                if let Some(table) = self.catalog.table(t) {
                    for c in &table.columns {
                        gold.columns.insert((table.name.clone(), c.name.clone()));
                    }
                }
            }
        }

        let mut i = 0;
        while i < self.tokens.len() {
            let Token::Word(w) = &self.tokens[i] else {
                i += 1;
                continue;
            };
            if self.consumed.contains(&i) {
                i += 1;
                continue;
            }
            let scope = self.scope_of[i];
            if self.tokens.get(i + 1) == Some(&Token::Period) {
                // qualifier.column or qualifier.*
                let table = match self.lookup_binding(scope, &w.value) {
                    Some(Binding::Table(t)) => Some(t.clone()),
                    Some(Binding::Derived) => None,
                    None => match self.catalog_table(&w.value) {
                        Some(t) => {
                            gold.tables.insert(t.clone());
                            Some(t)
                        }
                        None => return Err(unresolvable(&w.value, "unknown table or alias")),
                    },
                };
                match (table, self.tokens.get(i + 2)) {
                    (Some(t), Some(Token::Mul)) => {
                        let table = self.catalog.table(&t).expect("bound tables exist");
                        for c in &table.columns {
                            gold.columns.insert((table.name.clone(), c.name.clone()));
                        }
                    }
                    (Some(t), Some(Token::Word(col))) => {
                        let table = self.catalog.table(&t).expect("bound tables exist");
                        let c = table
                            .column(&col.value)
                            .ok_or_else(|| unresolvable(&format!("{}.{}", w.value, col.value), format!("no such column in {t}")))?;
                        gold.columns.insert((table.name.clone(), c.name.clone()));
                    }
                    _ => {}
                }
                i += 3;
                continue;
            }
            let is_call = self.tokens.get(i + 1) == Some(&Token::LParen);
            if is_call || is_structural(w) {
                i += 1;
                continue;
            }
            match self.resolve_unqualified(scope, &w.value) {
                Ok(Some(pair)) => {
                    gold.columns.insert(pair);
                }
                Ok(None) => {
                    let skippable = is_keyword(w)
                        || w.quote_style.is_some_and(|q| q != '`' && q != '[')
                        || self.output_aliases.contains(&w.value.to_lowercase())
                        || self.lookup_binding(scope, &w.value).is_some()
                        || self.chain_has_derived(scope);
                    if !skippable {
                        return Err(unresolvable(&w.value, "not a column of any table in scope"));
                    }
                    debug!(identifier = %w.value, "skipping non-column identifier");
                }
                Err(reason) => return Err(unresolvable(&w.value, reason)),
            }
            i += 1;
        }
        Ok(gold)
    }
}

/// Tables and `(table, column)` pairs referenced by `gold_sql`, with aliases
/// expanded and unqualified columns resolved by unique ownership among the
/// tables in scope.
pub fn derive_gold_linking(gold_sql: &str, catalog: &SchemaCatalog) -> Result<GoldLinking, LinkingError> {
    let mut r = Resolver::new(gold_sql, catalog)?;
    r.collect();
    r.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_catalog;

    fn derive(sql: &str) -> GoldLinking {
        derive_gold_linking(sql, &toy_catalog()).unwrap_or_else(|e| panic!("{sql}: {e}"))
    }

    fn set<const N: usize>(items: [(&str, &str); N]) -> BTreeSet<(String, String)> {
        items.iter().map(|(t, c)| (t.to_string(), c.to_string())).collect()
    }

    fn tables<const N: usize>(items: [&str; N]) -> BTreeSet<String> {
        items.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn single_identifier() {
        let g = derive("SELECT name FROM users");
        assert_eq!(g.tables, tables(["users"]));
        assert_eq!(g.columns, set([("users", "name")]));
    }

    #[test]
    fn aliased_join_keeps_referenced_columns_only() {
        let g = derive(
            "SELECT T1.name, SUM(T2.quantity) FROM users AS T1 INNER JOIN orders AS T2 \
             ON T1.user_id = T2.user_id WHERE T2.order_date >= '2024-01-01' GROUP BY T1.name",
        );
        assert_eq!(g.tables, tables(["orders", "users"]));
        assert_eq!(
            g.columns,
            set([
                ("users", "name"),
                ("users", "user_id"),
                ("orders", "quantity"),
                ("orders", "user_id"),
                ("orders", "order_date"),
            ])
        );
    }

    #[test]
    fn star_expands_to_catalog_columns() {
        let cat = toy_catalog();
        let g = derive("SELECT * FROM products WHERE price > 5");
        let expected: BTreeSet<_> = cat
            .table("products")
            .unwrap()
            .columns
            .iter()
            .map(|c| ("products".to_string(), c.name.clone()))
            .collect();
        assert_eq!(g.columns, expected);
        // COUNT(*) is not a projection star
        let g = derive("SELECT COUNT(*) FROM orders");
        assert!(g.columns.is_empty());
        assert_eq!(g.tables, tables(["orders"]));
    }

    #[test]
    fn unqualified_columns_resolve_by_unique_owner() {
        let g = derive("SELECT email, order_date FROM users JOIN orders ON users.user_id = orders.user_id");
        assert_eq!(
            g.columns,
            set([
                ("users", "email"),
                ("orders", "order_date"),
                ("users", "user_id"),
                ("orders", "user_id"),
            ])
        );
    }

    #[test]
    fn subquery_scopes_and_reused_aliases() {
        let g = derive(
            "SELECT T1.name FROM users AS T1 WHERE T1.user_id IN \
             (SELECT T1.user_id FROM orders AS T1 WHERE T1.product_id = 2)",
        );
        assert_eq!(g.tables, tables(["orders", "users"]));
        assert_eq!(
            g.columns,
            set([
                ("users", "name"),
                ("users", "user_id"),
                ("orders", "user_id"),
                ("orders", "product_id"),
            ])
        );
    }

    #[test]
    fn correlated_subquery_sees_outer_scope() {
        let g = derive("SELECT name FROM users WHERE EXISTS (SELECT 1 FROM orders WHERE orders.user_id = users.user_id AND quantity > 1)");
        assert!(g.columns.contains(&("orders".into(), "quantity".into())));
        assert!(g.columns.contains(&("users".into(), "name".into())));
    }

    #[test]
    fn output_aliases_and_functions_are_not_columns() {
        let g = derive("SELECT product_id, COUNT(order_id) AS cnt FROM orders GROUP BY product_id ORDER BY cnt DESC LIMIT 1");
        assert_eq!(g.columns, set([("orders", "product_id"), ("orders", "order_id")]));
    }

    #[test]
    fn union_branches_are_separate_scopes() {
        let g = derive("SELECT name FROM users UNION SELECT name FROM products");
        assert_eq!(g.columns, set([("users", "name"), ("products", "name")]));
    }

    #[test]
    fn unknown_identifier_is_unresolvable() {
        let err = derive_gold_linking("SELECT nope FROM users", &toy_catalog()).unwrap_err();
        assert!(matches!(err, LinkingError::Unresolvable { ref identifier, .. } if identifier == "nope"));
        assert!(derive_gold_linking("SELECT x.name FROM users", &toy_catalog()).is_err());
    }

    #[test]
    fn ambiguous_unqualified_column_is_unresolvable() {
        assert!(derive_gold_linking(
            "SELECT user_id FROM users JOIN orders ON users.user_id = orders.user_id",
            &toy_catalog()
        )
        .is_err());
    }

    #[test]
    fn quoted_identifiers_and_case() {
        let g = derive("SELECT `Name` FROM \"USERS\" WHERE Email IS NOT NULL");
        assert_eq!(g.tables, tables(["users"]));
        assert_eq!(g.columns, set([("users", "name"), ("users", "email")]));
    }
}
