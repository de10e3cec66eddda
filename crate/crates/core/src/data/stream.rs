use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{parse_instance, DatasetSchema, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Stop at the first malformed line.
    #[default]
    Strict,
    /// Skip malformed lines and count them.
    Lenient,
}

/// Line-at-a-time reader yielding instances in file order.
pub struct InstanceReader<R> {
    reader: R,
    schema: DatasetSchema,
    strictness: Strictness,
    buf: String,
    line_no: usize,
    offset: u64,
    skipped: usize,
    done: bool,
}

impl<R: BufRead> InstanceReader<R> {
    pub fn new(reader: R, schema: DatasetSchema, strictness: Strictness) -> Self {
        InstanceReader {
            reader,
            schema,
            strictness,
            buf: String::new(),
            line_no: 0,
            offset: 0,
            skipped: 0,
            done: false,
        }
    }

    /// Malformed lines dropped so far in lenient mode.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }
}

impl<R: BufRead> Iterator for InstanceReader<R> {
    type Item = Result<Instance>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            let n = match self.reader.read_line(&mut self.buf) {
                Ok(0) => {
                    self.done = true;
                    return None;
                }
                Ok(n) => n,
                Err(source) => {
                    self.done = true;
                    return Some(Err(Error::Io {
                        offset: self.offset,
                        source,
                    }));
                }
            };
            self.offset += n as u64;
            self.line_no += 1;
            match parse_instance(&self.buf, self.line_no, &self.schema) {
                Ok(inst) => return Some(Ok(inst)),
                Err(e) if self.strictness == Strictness::Strict => {
                    self.done = true;
                    return Some(Err(e));
                }
                Err(_) => self.skipped += 1,
            }
        }
        None
    }
}

/// Opens `path` and streams its instances in file order.
pub fn stream_time_ordered(
    path: &Path,
    schema: &DatasetSchema,
    strictness: Strictness,
) -> Result<InstanceReader<BufReader<File>>> {
    let file = File::open(path).map_err(|source| Error::Io { offset: 0, source })?;
    Ok(InstanceReader::new(
        BufReader::new(file),
        schema.clone(),
        strictness,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn schema() -> DatasetSchema {
        DatasetSchema::parse("buckets=256\nuser_field=0\nuser\tsingle\nad\tsingle\n").unwrap()
    }

    #[test]
    fn yields_in_file_order() {
        let data = "1\t1\ta\n0\t2\tb\n1\t3\tc\n";
        let got: Vec<_> = InstanceReader::new(Cursor::new(data), schema(), Strictness::Strict)
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(
            got.iter().map(|i| i.user_id).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(
            got.iter().map(|i| i.label).collect::<Vec<_>>(),
            vec![1, 0, 1]
        );
    }

    #[test]
    fn empty_input() {
        let mut r = InstanceReader::new(Cursor::new(""), schema(), Strictness::Strict);
        assert!(r.next().is_none());
    }

    #[test]
    fn strict_names_bad_line() {
        let data = "1\t1\ta\nbroken\n1\t3\tc\n";
        let mut r = InstanceReader::new(Cursor::new(data), schema(), Strictness::Strict);
        assert!(r.next().unwrap().is_ok());
        match r.next().unwrap() {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(r.next().is_none());
    }

    #[test]
    fn lenient_skips_and_counts() {
        let data = "1\t1\ta\nbroken\n1\t3\tc\n";
        let mut r = InstanceReader::new(Cursor::new(data), schema(), Strictness::Lenient);
        let got: Vec<_> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(r.skipped(), 1);
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let mut data = b"1\t1\ta\n".to_vec();
        data.extend_from_slice(&[0xff, 0xfe, b'\n']);
        let mut r = InstanceReader::new(Cursor::new(data), schema(), Strictness::Strict);
        assert!(r.next().unwrap().is_ok());
        match r.next().unwrap() {
            Err(Error::Io { offset: 6, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = stream_time_ordered(
            Path::new("/nonexistent/x.tsv"),
            &schema(),
            Strictness::Strict,
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Io { .. }));
    }
}
