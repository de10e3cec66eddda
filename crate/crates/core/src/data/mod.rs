//! Instances, schemas, feature hashing and the TSV record format.
//!
//! A data line is `label \t field_1 \t ... \t field_n`. Multi-valued cells
//! hold several tokens separated by `|` (whitespace also separates tokens, so
//! a raw title such as `Beijing flower delivery` yields three features). An
//! empty cell maps to the reserved missing feature, index 0.

mod stream;
mod synthetic;

pub use stream::{stream_time_ordered, InstanceReader, Strictness};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SyntheticImpression};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MISSING_FEATURE: u64 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a 64-bit hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a64(u64);

impl Default for Fnv1a64 {
    fn default() -> Self {
        Fnv1a64(FNV_OFFSET)
    }
}

impl Fnv1a64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a64::default();
    h.update(bytes);
    h.finish()
}

/// Maps `(field, token)` into `[1, num_buckets)`; 0 stays reserved for
/// missing values. The hashed key is the field index as 8 lowercase hex
/// digits, a colon, then the token bytes.
pub fn hash_feature(field_index: usize, token: &str, num_buckets: u64) -> u64 {
    debug_assert!(num_buckets >= 2 && num_buckets.is_power_of_two());
    let mut h = Fnv1a64::default();
    h.update(format!("{field_index:08x}:").as_bytes());
    h.update(token.as_bytes());
    1 + h.finish() % (num_buckets - 1)
}

/// User identity from the raw user token: the decimal value when the token is
/// numeric, otherwise its FNV-1a hash.
pub fn user_id_from_token(token: &str) -> u64 {
    if !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(v) = token.parse::<u64>() {
            return v;
        }
    }
    fnv1a64(token.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub multivalued: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSchema {
    fields: Vec<FieldSpec>,
    num_buckets: u64,
    user_field: usize,
}

impl DatasetSchema {
    pub fn new(fields: Vec<FieldSpec>, num_buckets: u64, user_field: usize) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Schema("no fields declared".into()));
        }
        if num_buckets < 2 || !num_buckets.is_power_of_two() {
            return Err(Error::Schema(format!(
                "buckets must be a power of two >= 2, got {num_buckets}"
            )));
        }
        if num_buckets > 1 << 48 {
            return Err(Error::Schema(format!("buckets {num_buckets} exceeds 2^48")));
        }
        if user_field >= fields.len() {
            return Err(Error::Schema(format!(
                "user_field {user_field} out of range for {} fields",
                fields.len()
            )));
        }
        if fields[user_field].multivalued {
            return Err(Error::Schema("user field cannot be multi-valued".into()));
        }
        Ok(DatasetSchema {
            fields,
            num_buckets,
            user_field,
        })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn num_buckets(&self) -> u64 {
        self.num_buckets
    }

    pub fn user_field(&self) -> usize {
        self.user_field
    }

    /// Parses the schema file format: `buckets=<2^k>`, `user_field=<index>`
    /// and one `name<TAB>single|multi` line per field. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        let mut buckets = None;
        let mut user_field = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::Schema(format!("line {}: {m}", i + 1));
            if let Some(v) = line.strip_prefix("buckets=") {
                buckets = Some(
                    v.trim()
                        .parse::<u64>()
                        .map_err(|e| bad(format!("buckets: {e}")))?,
                );
            } else if let Some(v) = line.strip_prefix("user_field=") {
                user_field = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| bad(format!("user_field: {e}")))?,
                );
            } else {
                let (name, kind) = line
                    .split_once('\t')
                    .ok_or_else(|| bad(format!("expected name<TAB>single|multi, got {line:?}")))?;
                let multivalued = match kind.trim() {
                    "single" => false,
                    "multi" => true,
                    other => return Err(bad(format!("unknown field kind {other:?}"))),
                };
                fields.push(FieldSpec {
                    name: name.to_string(),
                    multivalued,
                });
            }
        }
        let buckets = buckets.ok_or_else(|| Error::Schema("missing buckets= header".into()))?;
        let user_field =
            user_field.ok_or_else(|| Error::Schema("missing user_field= header".into()))?;
        DatasetSchema::new(fields, buckets, user_field)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { offset: 0, source })?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the schema.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "buckets={}", self.num_buckets);
        let _ = writeln!(out, "user_field={}", self.user_field);
        for f in &self.fields {
            let kind = if f.multivalued { "multi" } else { "single" };
            let _ = writeln!(out, "{}\t{kind}", f.name);
        }
        out
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldValue {
    pub field_index: u16,
    pub feature_indices: Vec<u64>,
}

/// One labeled impression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub label: u8,
    pub user_id: u64,
    pub fields: Vec<FieldValue>,
}

impl Instance {
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }

    /// Distinct feature indices across all fields, ascending.
    pub fn active_features(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self
            .fields
            .iter()
            .flat_map(|f| f.feature_indices.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn split_tokens(cell: &str, multivalued: bool) -> Vec<&str> {
    if multivalued {
        cell.split(|c: char| c == '|' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect()
    } else if cell.is_empty() {
        Vec::new()
    } else {
        vec![cell]
    }
}

fn field_value(index: usize, tokens: &[&str], buckets: u64) -> FieldValue {
    let feature_indices = if tokens.is_empty() {
        vec![MISSING_FEATURE]
    } else {
        tokens
            .iter()
            .map(|t| hash_feature(index, t, buckets))
            .collect()
    };
    FieldValue {
        field_index: index as u16,
        feature_indices,
    }
}

fn parse_label(cell: &str, line_no: usize) -> Result<u8> {
    match cell {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            line: line_no,
            message: format!("label must be 0 or 1, got {other:?}"),
        }),
    }
}

/// Parses one TSV record. `line_no` is 1-based and only used in errors.
pub fn parse_instance(line: &str, line_no: usize, schema: &DatasetSchema) -> Result<Instance> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != schema.num_fields() + 1 {
        return Err(Error::Parse {
            line: line_no,
            message: format!(
                "expected {} columns, found {}",
                schema.num_fields() + 1,
                cols.len()
            ),
        });
    }
    let label = parse_label(cols[0], line_no)?;
    let user_id = user_id_from_token(cols[1 + schema.user_field]);
    let fields = schema
        .fields
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let tokens = split_tokens(cols[i + 1], spec.multivalued);
            field_value(i, &tokens, schema.num_buckets)
        })
        .collect();
    Ok(Instance {
        label,
        user_id,
        fields,
    })
}

/// A record before hashing: label plus raw tokens per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub label: u8,
    pub cells: Vec<Vec<String>>,
}

impl RawRecord {
    pub fn to_tsv_line(&self) -> String {
        let mut line = String::new();
        line.push(if self.label == 1 { '1' } else { '0' });
        for cell in &self.cells {
            line.push('\t');
            line.push_str(&cell.join("|"));
        }
        line
    }

    /// Hashes the raw tokens directly, without going through text.
    pub fn to_instance(&self, schema: &DatasetSchema) -> Instance {
        let fields = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                let tokens: Vec<&str> = cell.iter().map(String::as_str).collect();
                field_value(i, &tokens, schema.num_buckets)
            })
            .collect();
        let user_token = self.cells[schema.user_field]
            .first()
            .map(String::as_str)
            .unwrap_or("");
        Instance {
            label: self.label,
            user_id: user_id_from_token(user_token),
            fields,
        }
    }
}

pub fn write_tsv(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_tsv_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| Error::Io { offset: 0, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Plain FNV-1a reference, written against the published constants.
    fn fnv_reference(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    fn table1_schema() -> DatasetSchema {
        DatasetSchema::parse(
            "buckets=1048576\nuser_field=0\nUser ID\tsingle\nUser Age\tsingle\nAd Title\tmulti\n",
        )
        .unwrap()
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), fnv_reference(b"foobar"));
    }

    #[test]
    fn hash_feature_golden() {
        // frozen from a standalone FNV-1a implementation
        assert_eq!(hash_feature(0, "24", 1 << 20), 190235);
        assert_eq!(hash_feature(3, "", 1 << 20), 836325);
        assert_eq!(hash_feature(5, "", 1 << 20), 489271);
        assert_ne!(hash_feature(3, "", 1 << 20), hash_feature(5, "", 1 << 20));
        assert_eq!(
            hash_feature(0, "24", 1 << 20),
            hash_feature(0, "24", 1 << 20)
        );
        let expect = 1 + fnv_reference(b"00000000:24") % ((1 << 20) - 1);
        assert_eq!(hash_feature(0, "24", 1 << 20), expect);
    }

    #[test]
    fn two_buckets_always_one() {
        for t in ["a", "b", "zzz"] {
            assert_eq!(hash_feature(1, t, 2), 1);
        }
    }

    #[test]
    fn parse_table1_row() {
        let schema = table1_schema();
        let inst = parse_instance("1\t2135147\t24\tBeijing flower delivery", 1, &schema).unwrap();
        assert_eq!(inst.label, 1);
        assert_eq!(inst.user_id, 2135147);
        assert_eq!(inst.fields.len(), 3);
        assert_eq!(inst.fields[0].feature_indices.len(), 1);
        assert_eq!(
            inst.fields[1].feature_indices,
            vec![hash_feature(1, "24", 1 << 20)]
        );
        assert_eq!(inst.fields[2].feature_indices.len(), 3);
        assert_eq!(
            inst.fields[2].feature_indices[1],
            hash_feature(2, "flower", 1 << 20)
        );
        // '|' separated form of the same title
        let piped = parse_instance("1\t2135147\t24\tBeijing|flower|delivery", 1, &schema).unwrap();
        assert_eq!(piped, inst);
    }

    #[test]
    fn parse_missing_cells() {
        let schema = table1_schema();
        let inst = parse_instance("0\t7\t\t", 1, &schema).unwrap();
        assert_eq!(inst.label, 0);
        assert_eq!(inst.user_id, 7);
        assert_eq!(inst.fields[1].feature_indices, vec![MISSING_FEATURE]);
        assert_eq!(inst.fields[2].feature_indices, vec![MISSING_FEATURE]);
        assert_eq!(parse_instance("0\t7\t\t", 1, &schema).unwrap(), inst);
    }

    #[test]
    fn parse_errors() {
        let schema = table1_schema();
        match parse_instance("1\t2\t3", 9, &schema) {
            Err(Error::Parse { line: 9, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_instance("2\t1\t2\tx", 4, &schema),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn non_numeric_user_is_hashed() {
        let schema = table1_schema();
        let inst = parse_instance("1\talice\t3\tx", 1, &schema).unwrap();
        assert_eq!(inst.user_id, fnv_reference(b"alice"));
    }

    #[test]
    fn schema_text_round_trip_and_validation() {
        let s = table1_schema();
        assert_eq!(DatasetSchema::parse(&s.to_text()).unwrap(), s);
        assert!(DatasetSchema::parse("buckets=1000\nuser_field=0\na\tsingle\n").is_err());
        assert!(DatasetSchema::parse("buckets=8\nuser_field=3\na\tsingle\n").is_err());
        assert!(DatasetSchema::parse("buckets=8\nuser_field=0\na\tdouble\n").is_err());
        assert!(DatasetSchema::parse("user_field=0\na\tsingle\n").is_err());
    }

    fn token() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_.-]{1,8}"
    }

    proptest! {
        #[test]
        fn indices_within_bucket_range(field in 0usize..64, tok in ".*", k in 1u32..30) {
            let nb = 1u64 << k;
            let idx = hash_feature(field, &tok, nb);
            prop_assert!(idx >= 1 && idx < nb);
        }

        #[test]
        fn parse_serialize_round_trip(
            label in 0u8..2,
            user in 0u64..1_000_000,
            age in prop::option::of(token()),
            title in prop::collection::vec(token(), 0..5),
        ) {
            let schema = table1_schema();
            let rec = RawRecord {
                label,
                cells: vec![vec![user.to_string()], age.into_iter().collect(), title],
            };
            let parsed = parse_instance(&rec.to_tsv_line(), 1, &schema).unwrap();
            prop_assert_eq!(parsed, rec.to_instance(&schema));
        }
    }
}
