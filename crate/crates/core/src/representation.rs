//! Textual schema representations.
//!
//! Six formats are supported. Layout rules per format:
//!
//! * **M-Schema**: `[DB_ID]` / `[Schema]` header, one bracketed tuple list per
//!   table, `Primary Key` and `Examples: [...]` annotations, then a
//!   `[Foreign keys]` section of `a.b=c.d` lines.
//! * **MAC-Schema**: one bracketed list per table of `(column, description.)`
//!   entries; low-cardinality text columns add `Value examples: [...]`.
//! * **DDL**: `<db_id> CREATE messages:` header followed by one
//!   `CREATE TABLE` block per table; key constraints follow a lone `,` line.
//! * **DIN-SQL**: one `table '<t>' with columns: ...` line per table and a
//!   `Relations:` section.
//! * **JSON**: pretty-printed object with 4-space indentation holding column
//!   types, primary key and foreign keys per table.
//! * **SQLAlchemy**: Python `Table(...)` declarations, referenced tables first.
//!
//! In MAC-Schema and SQLAlchemy output every column entry ends with a comma
//! except the final entry of the document.
//!
//! Escaping: identifiers are written verbatim in M-Schema, MAC-Schema, DDL
//! and DIN-SQL. JSON applies standard JSON string escaping. SQLAlchemy writes
//! names as Python string literals (single quotes, switching to double quotes
//! when the name contains a single quote).
//!
//! Output is canonical: no trailing whitespace on any line and exactly one
//! final newline (see [`canonicalize`]).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::catalog::{ColumnDef, ForeignKeyDef, SchemaCatalog, TableDef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RepresentationFormat {
    #[serde(rename = "mschema")]
    MSchema,
    #[serde(rename = "mac_schema")]
    MacSchema,
    #[serde(rename = "ddl")]
    Ddl,
    #[serde(rename = "din_sql")]
    DinSql,
    #[serde(rename = "json_raw")]
    JsonRaw,
    #[serde(rename = "sqlalchemy")]
    SqlAlchemy,
}

impl RepresentationFormat {
    pub const ALL: [RepresentationFormat; 6] = [
        RepresentationFormat::MSchema,
        RepresentationFormat::MacSchema,
        RepresentationFormat::Ddl,
        RepresentationFormat::DinSql,
        RepresentationFormat::JsonRaw,
        RepresentationFormat::SqlAlchemy,
    ];

    /// Stable name used in configuration files and fixture stores.
    pub fn name(self) -> &'static str {
        match self {
            RepresentationFormat::MSchema => "mschema",
            RepresentationFormat::MacSchema => "mac_schema",
            RepresentationFormat::Ddl => "ddl",
            RepresentationFormat::DinSql => "din_sql",
            RepresentationFormat::JsonRaw => "json_raw",
            RepresentationFormat::SqlAlchemy => "sqlalchemy",
        }
    }
}

impl fmt::Display for RepresentationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RepresentationFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "mschema" => Ok(Self::MSchema),
            "macschema" | "mac" => Ok(Self::MacSchema),
            "ddl" | "sqlcreate" => Ok(Self::Ddl),
            "dinsql" | "din" => Ok(Self::DinSql),
            "jsonraw" | "json" => Ok(Self::JsonRaw),
            "sqlalchemy" | "python" => Ok(Self::SqlAlchemy),
            _ => Err(format!("unknown representation format `{s}`")),
        }
    }
}

/// Strips trailing whitespace from every line, drops trailing blank lines
/// and terminates non-empty text with a single newline.
pub fn canonicalize(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return String::new();
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

pub fn render(catalog: &SchemaCatalog, format: RepresentationFormat) -> String {
    let raw = match format {
        RepresentationFormat::MSchema => render_mschema(catalog),
        RepresentationFormat::MacSchema => render_mac(catalog),
        RepresentationFormat::Ddl => render_ddl(catalog),
        RepresentationFormat::DinSql => render_dinsql(catalog),
        RepresentationFormat::JsonRaw => render_json(catalog),
        RepresentationFormat::SqlAlchemy => render_sqlalchemy(catalog),
    };
    canonicalize(&raw)
}

pub fn render_all(catalog: &SchemaCatalog) -> BTreeMap<RepresentationFormat, String> {
    RepresentationFormat::ALL
        .iter()
        .map(|&f| (f, render(catalog, f)))
        .collect()
}

fn render_mschema(catalog: &SchemaCatalog) -> String {
    let mut out = format!("[DB_ID]  {}\n[Schema]\n", catalog.db_id);
    for table in &catalog.tables {
        out.push_str(&format!("# Table: {}\n[\n", table.name));
        let entries: Vec<String> = table
            .columns
            .iter()
            .map(|c| {
                let mut e = format!("({}:{}", c.name, c.sql_type);
                if table.is_primary_key(&c.name) {
                    e.push_str(", Primary Key");
                }
                if !c.value_examples.is_empty() {
                    e.push_str(&format!(", Examples: [{}]", c.value_examples.join(", ")));
                }
                e.push(')');
                e
            })
            .collect();
        if !entries.is_empty() {
            out.push_str(&entries.join(",\n"));
            out.push('\n');
        }
        out.push_str("]\n");
    }
    out.push_str("[Foreign keys]\n");
    for fk in &catalog.foreign_keys {
        out.push_str(&format!(
            "{}.{}={}.{}\n",
            fk.from_table, fk.from_column, fk.to_table, fk.to_column
        ));
    }
    out
}

fn mac_description(col: &ColumnDef) -> String {
    let desc = col
        .description
        .as_deref()
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(|d| d.trim_end_matches('.').to_string())
        .unwrap_or_else(|| col.name.replace('_', " "));
    let mut e = format!("{}, {desc}.", col.name);
    if !col.category_values.is_empty() {
        let vals: Vec<String> = col.category_values.iter().map(|v| py_str(v)).collect();
        e.push_str(&format!(" Value examples: [{}].", vals.join(", ")));
    }
    e
}

fn render_mac(catalog: &SchemaCatalog) -> String {
    let total: usize = catalog.tables.iter().map(|t| t.columns.len()).sum();
    let mut emitted = 0;
    let mut out = String::new();
    for table in &catalog.tables {
        out.push_str(&format!("# Table: {}\n[\n", table.name));
        for col in &table.columns {
            emitted += 1;
            let sep = if emitted == total { "" } else { "," };
            out.push_str(&format!("  ({}){sep}\n", mac_description(col)));
        }
        out.push_str("]\n");
    }
    out
}

fn render_ddl(catalog: &SchemaCatalog) -> String {
    let mut blocks = vec![format!("{} CREATE messages:\n", catalog.db_id)];
    for table in &catalog.tables {
        let mut b = format!("CREATE TABLE {} (\n", table.name);
        for col in &table.columns {
            if col.sql_type.is_empty() {
                b.push_str(&format!("    {}\n", col.name));
            } else {
                b.push_str(&format!("    {} {}\n", col.name, col.sql_type));
            }
        }
        let mut constraints = Vec::new();
        if !table.primary_key.is_empty() {
            constraints.push(format!("    PRIMARY KEY ({})", table.primary_key.join(", ")));
        }
        for fk in catalog.foreign_keys_from(&table.name) {
            constraints.push(format!(
                "    FOREIGN KEY ({}) REFERENCES {} ({})",
                fk.from_column, fk.to_table, fk.to_column
            ));
        }
        if !constraints.is_empty() {
            b.push_str(",\n");
            for c in constraints {
                b.push_str(&c);
                b.push('\n');
            }
        }
        b.push_str(");\n");
        blocks.push(b);
    }
    blocks.join("\n")
}

fn render_dinsql(catalog: &SchemaCatalog) -> String {
    let mut out = String::new();
    for table in &catalog.tables {
        let cols: Vec<String> = table
            .columns
            .iter()
            .map(|c| format!("{} ({})", c.name, c.sql_type))
            .collect();
        out.push_str(&format!("table '{}' with columns: {}\n", table.name, cols.join(", ")));
    }
    out.push_str("\nRelations:\n");
    for fk in &catalog.foreign_keys {
        out.push_str(&format!(
            "{}.{} -> {}.{}\n",
            fk.from_table, fk.from_column, fk.to_table, fk.to_column
        ));
    }
    out
}

fn json_document(catalog: &SchemaCatalog) -> Value {
    let mut tables = Map::new();
    for table in &catalog.tables {
        let columns: Map<String, Value> = table
            .columns
            .iter()
            .map(|c| (c.name.clone(), Value::String(c.sql_type.clone())))
            .collect();
        let mut fks = Map::new();
        for fk in catalog.foreign_keys_from(&table.name) {
            if fks.contains_key(&fk.from_column) {
                continue;
            }
            let mut target = Map::new();
            target.insert("referenced_table".into(), Value::String(fk.to_table.clone()));
            target.insert("referenced_column".into(), Value::String(fk.to_column.clone()));
            fks.insert(fk.from_column.clone(), Value::Object(target));
        }
        let mut keys = Map::new();
        keys.insert(
            "primary_key".into(),
            Value::Array(table.primary_key.iter().cloned().map(Value::String).collect()),
        );
        let mut entry = Map::new();
        entry.insert("columns".into(), Value::Object(columns));
        entry.insert("keys".into(), Value::Object(keys));
        entry.insert("foreign_keys".into(), Value::Object(fks));
        tables.insert(table.name.clone(), Value::Object(entry));
    }
    let mut root = Map::new();
    root.insert("tables".into(), Value::Object(tables));
    Value::Object(root)
}

fn render_json(catalog: &SchemaCatalog) -> String {
    let doc = json_document(catalog);
    let mut buf = Vec::new();
    let formatter = serde_json::ser::PrettyFormatter::with_indent(b"    ");
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, formatter);
    doc.serialize(&mut ser).expect("serializing a JSON value cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[derive(Debug, thiserror::Error)]
#[error("invalid schema JSON: {0}")]
pub struct JsonSchemaError(String);

/// Parses [`RepresentationFormat::JsonRaw`] output back into a catalog.
///
/// Sample values, descriptions, nullability and defaults are not part of the
/// format and come back empty.
pub fn catalog_from_json(db_id: &str, text: &str) -> Result<SchemaCatalog, JsonSchemaError> {
    #[derive(Deserialize)]
    struct Doc {
        tables: IndexMap<String, TableDoc>,
    }
    #[derive(Deserialize)]
    struct TableDoc {
        columns: IndexMap<String, String>,
        keys: KeysDoc,
        foreign_keys: IndexMap<String, FkDoc>,
    }
    #[derive(Deserialize)]
    struct KeysDoc {
        primary_key: Vec<String>,
    }
    #[derive(Deserialize)]
    struct FkDoc {
        referenced_table: String,
        referenced_column: String,
    }

    let doc: Doc = serde_json::from_str(text).map_err(|e| JsonSchemaError(e.to_string()))?;
    let mut catalog = SchemaCatalog::empty(db_id);
    for (name, t) in doc.tables {
        for (col, fk) in &t.foreign_keys {
            catalog.foreign_keys.push(ForeignKeyDef {
                from_table: name.clone(),
                from_column: col.clone(),
                to_table: fk.referenced_table.clone(),
                to_column: fk.referenced_column.clone(),
            });
        }
        catalog.tables.push(TableDef {
            name,
            columns: t.columns.into_iter().map(|(n, ty)| ColumnDef::new(n, ty)).collect(),
            primary_key: t.keys.primary_key,
        });
    }
    Ok(catalog)
}

/// Python string literal in `repr` style.
fn py_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn sqlalchemy_type(sql_type: &str) -> &'static str {
    let upper = sql_type.trim().to_ascii_uppercase();
    let base = upper.split('(').next().unwrap_or("").trim();
    match base {
        "INTEGER" | "INT" | "BIGINT" | "SMALLINT" | "TINYINT" | "MEDIUMINT" => "Integer",
        "TEXT" | "CLOB" => "Text",
        "VARCHAR" | "CHAR" | "NVARCHAR" | "NCHAR" | "CHARACTER" | "VARYING CHARACTER" => "String",
        "REAL" | "FLOAT" | "DOUBLE" | "DOUBLE PRECISION" => "Float",
        "NUMERIC" | "DECIMAL" => "Numeric",
        "DATE" => "Date",
        "DATETIME" | "TIMESTAMP" => "DateTime",
        "TIME" => "Time",
        "BOOLEAN" | "BOOL" => "Boolean",
        "BLOB" => "LargeBinary",
        _ if base.contains("INT") => "Integer",
        _ if base.contains("CHAR") || base.contains("CLOB") || base.contains("TEXT") => "Text",
        _ if base.is_empty() || base.contains("BLOB") => "LargeBinary",
        _ if base.contains("REAL") || base.contains("FLOA") || base.contains("DOUB") => "Float",
        _ => "Numeric",
    }
}

fn python_ident(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

/// Stable topological order: a table is emitted once every table it
/// references has been emitted; cycles fall back to catalog order.
fn dependency_order(catalog: &SchemaCatalog) -> Vec<&TableDef> {
    let mut remaining: Vec<&TableDef> = catalog.tables.iter().collect();
    let mut done: HashSet<&str> = HashSet::new();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let ready = remaining.iter().position(|t| {
            catalog.foreign_keys_from(&t.name).all(|fk| {
                fk.to_table == t.name || done.contains(fk.to_table.as_str()) || catalog.table(&fk.to_table).is_none()
            })
        });
        let t = remaining.remove(ready.unwrap_or(0));
        done.insert(t.name.as_str());
        order.push(t);
    }
    order
}

fn render_sqlalchemy(catalog: &SchemaCatalog) -> String {
    let order = dependency_order(catalog);
    let mut imports: BTreeSet<&str> = ["Column", "MetaData", "Table"].into_iter().collect();
    let total: usize = catalog.tables.iter().map(|t| t.columns.len()).sum();
    let mut emitted = 0;
    let mut blocks = Vec::new();

    for table in order {
        let mut b = format!("t_{} = Table(\n    {}, metadata,\n", python_ident(&table.name), py_str(&table.name));
        for col in &table.columns {
            let mut args = vec![py_str(&col.name)];
            match catalog
                .foreign_keys_from(&table.name)
                .find(|fk| fk.from_column == col.name)
            {
                Some(fk) => {
                    imports.insert("ForeignKey");
                    args.push(format!("ForeignKey({})", py_str(&format!("{}.{}", fk.to_table, fk.to_column))));
                }
                None => {
                    let ty = sqlalchemy_type(&col.sql_type);
                    imports.insert(ty);
                    args.push(ty.to_string());
                }
            }
            if table.is_primary_key(&col.name) {
                args.push("primary_key=True".into());
            } else if !col.nullable {
                args.push("nullable=False".into());
            }
            if let Some(default) = &col.default {
                imports.insert("text");
                args.push(format!("server_default=text({})", py_str(default)));
            }
            emitted += 1;
            let sep = if emitted == total { "" } else { "," };
            b.push_str(&format!("    Column({}){sep}\n", args.join(", ")));
        }
        b.push_str(")\n");
        blocks.push(b);
    }

    let imports: Vec<&str> = imports.into_iter().collect();
    let mut out = format!(
        "from sqlalchemy import {}\n\nmetadata = MetaData()\n\n\n",
        imports.join(", ")
    );
    out.push_str(&blocks.join("\n"));
    out
}
