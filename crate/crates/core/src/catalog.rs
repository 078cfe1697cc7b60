//! Canonical schema model of one database, built by introspecting a SQLite
//! file, plus linking-driven filtering at three levels.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::linking::LinkingPrediction;

pub const DEFAULT_SAMPLE_K: usize = 3;

/// Text columns with at most this many distinct values carry their full
/// value set (used by the MAC-Schema rendering).
pub const DEFAULT_CATEGORY_LIMIT: usize = 10;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("database `{db_id}` is not readable: {reason}")]
    Unreadable { db_id: String, reason: String },
    #[error("database `{db_id}` is malformed: {reason}")]
    Malformed { db_id: String, reason: String },
    #[error("introspection of `{db_id}` failed: {source}")]
    Query {
        db_id: String,
        #[source]
        source: rusqlite::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub sql_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// First distinct non-null values in natural row order.
    #[serde(default)]
    pub value_examples: Vec<String>,
    /// Complete distinct value set of a low-cardinality text column, most
    /// frequent first. Empty for every other column.
    #[serde(default)]
    pub category_values: Vec<String>,
    pub nullable: bool,
    #[serde(default)]
    pub default: Option<String>,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, sql_type: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            sql_type: sql_type.into(),
            description: None,
            value_examples: Vec::new(),
            category_values: Vec::new(),
            nullable: true,
            default: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    /// Declared primary key. Filtering never rewrites it, so a filtered
    /// table may list key columns that are no longer in `columns`.
    pub primary_key: Vec<String>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn is_primary_key(&self, column: &str) -> bool {
        self.primary_key.iter().any(|k| k.eq_ignore_ascii_case(column))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForeignKeyDef {
    pub from_table: String,
    pub from_column: String,
    pub to_table: String,
    pub to_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub db_id: String,
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKeyDef>,
}

impl SchemaCatalog {
    pub fn empty(db_id: impl Into<String>) -> Self {
        Self {
            db_id: db_id.into(),
            tables: Vec::new(),
            foreign_keys: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Foreign keys whose source column lives in `table`, in catalog order.
    pub fn foreign_keys_from<'a>(&'a self, table: &'a str) -> impl Iterator<Item = &'a ForeignKeyDef> {
        self.foreign_keys
            .iter()
            .filter(move |fk| fk.from_table.eq_ignore_ascii_case(table))
    }

    /// Checks the structural invariants of an introspected catalog.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for table in &self.tables {
            if !seen.insert(table.name.to_lowercase()) {
                return Err(format!("duplicate table `{}`", table.name));
            }
            let mut cols = HashSet::new();
            for col in &table.columns {
                if !cols.insert(col.name.to_lowercase()) {
                    return Err(format!("duplicate column `{}.{}`", table.name, col.name));
                }
            }
            for key in &table.primary_key {
                if table.column(key).is_none() {
                    return Err(format!("primary key `{}.{key}` is not a column", table.name));
                }
            }
        }
        for fk in &self.foreign_keys {
            let ok = |t: &str, c: &str| self.table(t).and_then(|t| t.column(c)).is_some();
            if !ok(&fk.from_table, &fk.from_column) || !ok(&fk.to_table, &fk.to_column) {
                return Err(format!(
                    "dangling foreign key {}.{} -> {}.{}",
                    fk.from_table, fk.from_column, fk.to_table, fk.to_column
                ));
            }
        }
        Ok(())
    }

    /// Attaches column descriptions keyed by lowercase `(table, column)`.
    pub fn apply_descriptions(&mut self, descriptions: &HashMap<(String, String), String>) {
        for table in &mut self.tables {
            let tkey = table.name.to_lowercase();
            for col in &mut table.columns {
                if let Some(d) = descriptions.get(&(tkey.clone(), col.name.to_lowercase())) {
                    col.description = Some(d.clone());
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterLevel {
    #[serde(rename = "none")]
    NoFiltering,
    #[serde(rename = "table")]
    TableOnly,
    #[serde(rename = "full")]
    FullFiltering,
}

impl FilterLevel {
    pub const ALL: [FilterLevel; 3] = [
        FilterLevel::NoFiltering,
        FilterLevel::TableOnly,
        FilterLevel::FullFiltering,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterLevel::NoFiltering => "none",
            FilterLevel::TableOnly => "table",
            FilterLevel::FullFiltering => "full",
        }
    }
}

impl fmt::Display for FilterLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "no" | "no_filtering" => Ok(FilterLevel::NoFiltering),
            "table" | "table_only" => Ok(FilterLevel::TableOnly),
            "full" | "column" | "full_filtering" => Ok(FilterLevel::FullFiltering),
            other => Err(format!("unknown filter level `{other}` (expected none, table or full)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IntrospectOptions {
    pub sample_k: usize,
    pub category_limit: usize,
}

impl Default for IntrospectOptions {
    fn default() -> Self {
        Self {
            sample_k: DEFAULT_SAMPLE_K,
            category_limit: DEFAULT_CATEGORY_LIMIT,
        }
    }
}

pub fn introspect(db_path: &Path, sample_k: usize) -> Result<SchemaCatalog, CatalogError> {
    introspect_with(
        db_path,
        IntrospectOptions {
            sample_k,
            ..IntrospectOptions::default()
        },
    )
}

pub fn introspect_with(db_path: &Path, opts: IntrospectOptions) -> Result<SchemaCatalog, CatalogError> {
    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    if let Err(e) = std::fs::metadata(db_path) {
        return Err(CatalogError::Unreadable {
            db_id,
            reason: e.to_string(),
        });
    }
    let conn = Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| CatalogError::Unreadable {
        db_id: db_id.clone(),
        reason: e.to_string(),
    })?;

    let classify = |source: rusqlite::Error| -> CatalogError {
        match source.sqlite_error_code() {
            Some(rusqlite::ErrorCode::NotADatabase) | Some(rusqlite::ErrorCode::DatabaseCorrupt) => {
                CatalogError::Malformed {
                    db_id: db_id.clone(),
                    reason: source.to_string(),
                }
            }
            _ => CatalogError::Query {
                db_id: db_id.clone(),
                source,
            },
        }
    };

    let table_names = base_tables(&conn).map_err(classify)?;
    let mut tables = Vec::with_capacity(table_names.len());
    let mut raw_fks = Vec::new();
    for name in &table_names {
        tables.push(read_table(&conn, name, opts).map_err(classify)?);
        raw_fks.extend(read_foreign_keys(&conn, name).map_err(classify)?);
    }

    let mut catalog = SchemaCatalog {
        db_id,
        tables,
        foreign_keys: Vec::new(),
    };
    let mut seen = HashSet::new();
    for raw in raw_fks {
        match resolve_fk(&catalog, raw) {
            Ok(fk) => {
                if seen.insert(fk.clone()) {
                    catalog.foreign_keys.push(fk);
                }
            }
            Err(msg) => warn!(db_id = %catalog.db_id, "dropping foreign key: {msg}"),
        }
    }
    Ok(catalog)
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn base_tables(conn: &Connection) -> rusqlite::Result<Vec<String>> {
    // Force the header to be read so a non-database file fails here.
    conn.query_row("SELECT count(*) FROM sqlite_schema", [], |r| r.get::<_, i64>(0))?;
    let mut stmt = conn.prepare(
        "SELECT m.name FROM sqlite_schema AS m \
         JOIN pragma_table_list AS tl ON tl.name = m.name AND tl.schema = 'main' \
         WHERE m.type = 'table' AND tl.type = 'table' AND m.name NOT LIKE 'sqlite\\_%' ESCAPE '\\' \
         ORDER BY m.rowid",
    )?;
    let names = stmt
        .query_map([], |r| r.get::<_, String>(0))?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(names)
}

fn read_table(conn: &Connection, name: &str, opts: IntrospectOptions) -> rusqlite::Result<TableDef> {
    let mut stmt =
        conn.prepare("SELECT name, type, \"notnull\", dflt_value, pk FROM pragma_table_info(?1) ORDER BY cid")?;
    let rows = stmt
        .query_map([name], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, Option<String>>(1)?.unwrap_or_default(),
                r.get::<_, i64>(2)?,
                r.get::<_, Option<String>>(3)?,
                r.get::<_, i64>(4)?,
            ))
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;

    let mut pk: Vec<(i64, String)> = Vec::new();
    let mut columns = Vec::with_capacity(rows.len());
    for (col_name, sql_type, notnull, default, pk_pos) in rows {
        if pk_pos > 0 {
            pk.push((pk_pos, col_name.clone()));
        }
        let mut col = ColumnDef::new(col_name, sql_type);
        col.nullable = notnull == 0;
        col.default = default;
        col.value_examples = sample_values(conn, name, &col.name, opts.sample_k)?;
        if opts.category_limit > 0 && has_text_affinity(&col.sql_type) {
            col.category_values = category_values(conn, name, &col.name, opts.category_limit)?;
        }
        columns.push(col);
    }
    pk.sort();
    Ok(TableDef {
        name: name.to_string(),
        columns,
        primary_key: pk.into_iter().map(|(_, c)| c).collect(),
    })
}

/// SQLite column affinity rule for TEXT.
fn has_text_affinity(sql_type: &str) -> bool {
    let t = sql_type.to_ascii_uppercase();
    !t.contains("INT") && (t.contains("CHAR") || t.contains("CLOB") || t.contains("TEXT"))
}

fn sample_values(conn: &Connection, table: &str, column: &str, k: usize) -> rusqlite::Result<Vec<String>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let col = quote_ident(column);
    let sql = format!(
        "SELECT {col} FROM {} NOT INDEXED WHERE {col} IS NOT NULL",
        quote_ident(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([])?;
    let mut out: Vec<String> = Vec::with_capacity(k);
    while let Some(row) = rows.next()? {
        let Some(lit) = render_literal(row.get_ref(0)?) else {
            continue;
        };
        if !out.contains(&lit) {
            out.push(lit);
            if out.len() == k {
                break;
            }
        }
    }
    Ok(out)
}

fn category_values(conn: &Connection, table: &str, column: &str, limit: usize) -> rusqlite::Result<Vec<String>> {
    let col = quote_ident(column);
    let sql = format!(
        "SELECT {col}, count(*) FROM {} WHERE {col} IS NOT NULL GROUP BY {col} ORDER BY 2 DESC, 1 ASC LIMIT ?1",
        quote_ident(table)
    );
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([(limit + 1) as i64])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        if let Some(lit) = render_literal(row.get_ref(0)?) {
            out.push(lit);
        }
    }
    if out.len() > limit {
        out.clear();
    }
    Ok(out)
}

/// Renders a stored value as a schema example literal; blobs are skipped.
pub(crate) fn render_literal(value: ValueRef<'_>) -> Option<String> {
    match value {
        ValueRef::Null | ValueRef::Blob(_) => None,
        ValueRef::Integer(i) => Some(i.to_string()),
        ValueRef::Real(f) => Some(render_real(f)),
        ValueRef::Text(t) => Some(String::from_utf8_lossy(t).into_owned()),
    }
}

pub(crate) fn render_real(f: f64) -> String {
    if f.is_finite() && f.fract() == 0.0 && f.abs() < 1e16 {
        format!("{f:.1}")
    } else {
        f.to_string()
    }
}

struct RawForeignKey {
    from_table: String,
    from_column: String,
    to_table: String,
    to_column: Option<String>,
}

fn read_foreign_keys(conn: &Connection, table: &str) -> rusqlite::Result<Vec<RawForeignKey>> {
    // SQLite numbers foreign keys in reverse declaration order.
    let mut stmt = conn.prepare(
        "SELECT \"table\", \"from\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id DESC, seq ASC",
    )?;
    let rows = stmt
        .query_map([table], |r| {
            Ok(RawForeignKey {
                from_table: table.to_string(),
                to_table: r.get(0)?,
                from_column: r.get(1)?,
                to_column: r.get(2)?,
            })
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(rows)
}

fn resolve_fk(catalog: &SchemaCatalog, raw: RawForeignKey) -> Result<ForeignKeyDef, String> {
    let describe = || {
        format!(
            "{}.{} -> {}.{}",
            raw.from_table,
            raw.from_column,
            raw.to_table,
            raw.to_column.as_deref().unwrap_or("<pk>")
        )
    };
    let from_table = catalog.table(&raw.from_table).ok_or_else(describe)?;
    let from_column = from_table.column(&raw.from_column).ok_or_else(describe)?;
    let to_table = catalog.table(&raw.to_table).ok_or_else(describe)?;
    let to_column = match &raw.to_column {
        Some(c) => to_table.column(c).ok_or_else(describe)?.name.clone(),
        // An omitted target column means the referenced table's primary key.
        None => match to_table.primary_key.as_slice() {
            [single] => single.clone(),
            _ => return Err(describe()),
        },
    };
    Ok(ForeignKeyDef {
        from_table: from_table.name.clone(),
        from_column: from_column.name.clone(),
        to_table: to_table.name.clone(),
        to_column,
    })
}

/// Loads BIRD-style `database_description/<table>.csv` files.
///
/// Keys are lowercase `(table, column)`. The expanded column name is
/// preferred; the free-text description is the fallback.
pub fn load_descriptions(dir: &Path) -> std::io::Result<HashMap<(String, String), String>> {
    let mut out = HashMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for path in entries {
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("csv")) != Some(true) {
            continue;
        }
        let table = path.file_stem().unwrap_or_default().to_string_lossy().to_lowercase();
        let bytes = std::fs::read(&path)?;
        let text = String::from_utf8_lossy(&bytes);
        let text = text.trim_start_matches('\u{feff}');
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let headers = match reader.headers() {
            Ok(h) => h.iter().map(|h| h.trim().to_lowercase()).collect::<Vec<_>>(),
            Err(e) => {
                warn!(path = %path.display(), "skipping description file: {e}");
                continue;
            }
        };
        let idx = |name: &str| headers.iter().position(|h| h == name);
        let (Some(orig), name_idx, desc_idx) = (
            idx("original_column_name"),
            idx("column_name"),
            idx("column_description"),
        ) else {
            continue;
        };
        for record in reader.records().filter_map(|r| r.ok()) {
            let column = record.get(orig).unwrap_or("").trim().to_lowercase();
            if column.is_empty() {
                continue;
            }
            let pick = |i: Option<usize>| {
                i.and_then(|i| record.get(i))
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
            };
            if let Some(desc) = pick(name_idx).or_else(|| pick(desc_idx)) {
                out.insert((table.clone(), column), desc);
            }
        }
    }
    Ok(out)
}

/// Prunes a catalog according to a linking prediction.
///
/// Unknown table or column names in the prediction are ignored with a
/// warning. At [`FilterLevel::FullFiltering`] the endpoint columns of every
/// retained foreign key are kept even when the prediction omitted them.
pub fn apply_filter(catalog: &SchemaCatalog, prediction: &LinkingPrediction, level: FilterLevel) -> SchemaCatalog {
    if level == FilterLevel::NoFiltering {
        return catalog.clone();
    }

    // canonical table name -> predicted canonical column names
    let mut selected: HashMap<&str, HashSet<&str>> = HashMap::new();
    for (table_name, columns) in &prediction.selection {
        let Some(table) = catalog.table(table_name) else {
            warn!(db_id = %catalog.db_id, table = %table_name, "prediction names an unknown table");
            continue;
        };
        let cols = selected.entry(table.name.as_str()).or_default();
        for c in columns {
            match table.column(c) {
                Some(col) => {
                    cols.insert(col.name.as_str());
                }
                None => warn!(db_id = %catalog.db_id, table = %table.name, column = %c, "prediction names an unknown column"),
            }
        }
    }
    if selected.is_empty() {
        warn!(db_id = %catalog.db_id, level = %level, "empty linking prediction; schema filtered to nothing");
    }

    let foreign_keys: Vec<ForeignKeyDef> = catalog
        .foreign_keys
        .iter()
        .filter(|fk| selected.contains_key(fk.from_table.as_str()) && selected.contains_key(fk.to_table.as_str()))
        .cloned()
        .collect();

    let tables = catalog
        .tables
        .iter()
        .filter(|t| selected.contains_key(t.name.as_str()))
        .map(|t| {
            if level == FilterLevel::TableOnly {
                return t.clone();
            }
            let wanted = &selected[t.name.as_str()];
            let forced = |col: &str| {
                foreign_keys.iter().any(|fk| {
                    (fk.from_table == t.name && fk.from_column == col) || (fk.to_table == t.name && fk.to_column == col)
                })
            };
            TableDef {
                name: t.name.clone(),
                columns: t
                    .columns
                    .iter()
                    .filter(|c| wanted.contains(c.name.as_str()) || forced(&c.name))
                    .cloned()
                    .collect(),
                primary_key: t.primary_key.clone(),
            }
        })
        .collect();

    SchemaCatalog {
        db_id: catalog.db_id.clone(),
        tables,
        foreign_keys,
    }
}
