//! Minimal PLY container: header parsing, ASCII / binary readers for scalar
//! vertex data and a binary-little-endian writer.
//!
//! Only the element named `vertex` is decoded into values; any other element
//! (faces, list properties) is parsed and skipped.

use std::io::{BufRead, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("property `{property}` has type {found}, expected {expected}")]
    TypeMismatch {
        property: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("missing required property `{0}`")]
    MissingProperty(String),
    #[error("element {index}: {message}")]
    Element { index: usize, message: String },
    #[error("unexpected end of data in element {index}")]
    Truncated { index: usize },
    #[error("read failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementDef {
    pub name: String,
    pub count: usize,
    pub properties: Vec<Property>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub format: Format,
    pub elements: Vec<ElementDef>,
    pub comments: Vec<String>,
}

impl Header {
    pub fn element(&self, name: &str) -> Option<&ElementDef> {
        self.elements.iter().find(|e| e.name == name)
    }
}

impl ElementDef {
    pub fn property_index(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    pub fn scalar_type(&self, name: &str) -> Option<ScalarType> {
        self.properties
            .iter()
            .find(|p| p.name == name)
            .and_then(|p| match p.kind {
                PropertyKind::Scalar(t) => Some(t),
                PropertyKind::List { .. } => None,
            })
    }
}

pub fn read_header<R: BufRead>(reader: &mut R) -> Result<Header, PlyError> {
    let mut line = String::new();
    let next_line = |reader: &mut R, line: &mut String| -> Result<bool, PlyError> {
        line.clear();
        let n = reader.read_line(line)?;
        Ok(n > 0)
    };

    if !next_line(reader, &mut line)? || line.trim_end() != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }

    let mut format = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    let mut comments = Vec::new();
    loop {
        if !next_line(reader, &mut line)? {
            return Err(PlyError::Header("missing end_header".into()));
        }
        let trimmed = line.trim();
        let mut tokens = trimmed.split_whitespace();
        match tokens.next() {
            None => continue,
            Some("end_header") => break,
            Some("comment") | Some("obj_info") => {
                comments.push(trimmed.split_once(' ').map_or("", |(_, rest)| rest).to_string())
            }
            Some("format") => {
                let f = match tokens.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLittleEndian,
                    Some("binary_big_endian") => Format::BinaryBigEndian,
                    other => {
                        return Err(PlyError::Header(format!("unknown format {other:?}")));
                    }
                };
                format = Some(f);
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| PlyError::Header("element without name".into()))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| PlyError::Header(format!("element `{name}` bad count")))?;
                elements.push(ElementDef {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                let t = tokens
                    .next()
                    .ok_or_else(|| PlyError::Header("property without type".into()))?;
                let kind = if t == "list" {
                    let count = tokens.next().and_then(ScalarType::parse);
                    let item = tokens.next().and_then(ScalarType::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => PropertyKind::List { count, item },
                        _ => return Err(PlyError::Header("bad list property".into())),
                    }
                } else {
                    PropertyKind::Scalar(
                        ScalarType::parse(t)
                            .ok_or_else(|| PlyError::Header(format!("unknown type `{t}`")))?,
                    )
                };
                let name = tokens
                    .next()
                    .ok_or_else(|| PlyError::Header("property without name".into()))?;
                if element.property_index(name).is_some() {
                    return Err(PlyError::Header(format!("duplicate property `{name}`")));
                }
                element.properties.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            Some(other) => return Err(PlyError::Header(format!("unknown keyword `{other}`"))),
        }
    }

    Ok(Header {
        format: format.ok_or_else(|| PlyError::Header("missing format line".into()))?,
        elements,
        comments,
    })
}

/// Scalar values of one element, row-major, one `f64` per scalar property.
/// List properties are skipped and occupy no column.
#[derive(Clone, Debug)]
pub struct ElementData {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ElementData {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn read_binary_scalar<R: Read>(r: &mut R, t: ScalarType, big: bool) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    let b = &mut buf[..t.size()];
    r.read_exact(b)?;
    macro_rules! conv {
        ($ty:ty) => {{
            let arr: [u8; std::mem::size_of::<$ty>()] = b.try_into().unwrap();
            if big {
                <$ty>::from_be_bytes(arr) as f64
            } else {
                <$ty>::from_le_bytes(arr) as f64
            }
        }};
    }
    Ok(match t {
        ScalarType::I8 => conv!(i8),
        ScalarType::U8 => conv!(u8),
        ScalarType::I16 => conv!(i16),
        ScalarType::U16 => conv!(u16),
        ScalarType::I32 => conv!(i32),
        ScalarType::U32 => conv!(u32),
        ScalarType::F32 => conv!(f32),
        ScalarType::F64 => conv!(f64),
    })
}

/// Reads the body after `read_header` and returns the scalar data of the
/// element named `wanted`.
pub fn read_element<R: BufRead>(
    reader: &mut R,
    header: &Header,
    wanted: &str,
) -> Result<ElementData, PlyError> {
    let mut result = None;
    let mut ascii_lines = None;
    if header.format == Format::Ascii {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        ascii_lines = Some(
            text.lines()
                .map(str::to_owned)
                .filter(|l| !l.trim().is_empty())
                .collect::<Vec<_>>()
                .into_iter(),
        );
    }

    for element in &header.elements {
        let keep = element.name == wanted;
        let columns: Vec<String> = element
            .properties
            .iter()
            .filter(|p| matches!(p.kind, PropertyKind::Scalar(_)))
            .map(|p| p.name.clone())
            .collect();
        let mut rows = Vec::with_capacity(if keep { element.count } else { 0 });
        for index in 0..element.count {
            let mut row = Vec::with_capacity(columns.len());
            match header.format {
                Format::Ascii => {
                    let line = ascii_lines
                        .as_mut()
                        .unwrap()
                        .next()
                        .ok_or(PlyError::Truncated { index })?;
                    let mut tokens = line.split_whitespace();
                    let mut take = |t: ScalarType| -> Result<f64, PlyError> {
                        let tok = tokens.next().ok_or(PlyError::Truncated { index })?;
                        let v: f64 = tok.parse().map_err(|_| PlyError::Element {
                            index,
                            message: format!("cannot parse `{tok}` as {}", t.name()),
                        })?;
                        if !t.is_float() && v.fract() != 0.0 {
                            return Err(PlyError::Element {
                                index,
                                message: format!("`{tok}` is not an integer"),
                            });
                        }
                        Ok(v)
                    };
                    for p in &element.properties {
                        match p.kind {
                            PropertyKind::Scalar(t) => row.push(take(t)?),
                            PropertyKind::List { count, item } => {
                                let n = take(count)? as usize;
                                for _ in 0..n {
                                    take(item)?;
                                }
                            }
                        }
                    }
                }
                Format::BinaryLittleEndian | Format::BinaryBigEndian => {
                    let big = header.format == Format::BinaryBigEndian;
                    let map = |e: std::io::Error| {
                        if e.kind() == std::io::ErrorKind::UnexpectedEof {
                            PlyError::Truncated { index }
                        } else {
                            PlyError::Io(e)
                        }
                    };
                    for p in &element.properties {
                        match p.kind {
                            PropertyKind::Scalar(t) => {
                                row.push(read_binary_scalar(reader, t, big).map_err(map)?)
                            }
                            PropertyKind::List { count, item } => {
                                let n = read_binary_scalar(reader, count, big).map_err(map)?;
                                for _ in 0..n as usize {
                                    read_binary_scalar(reader, item, big).map_err(map)?;
                                }
                            }
                        }
                    }
                }
            }
            if keep {
                rows.push(row);
            }
        }
        if keep {
            result = Some(ElementData { columns, rows });
            // Nothing after the wanted element is needed.
            break;
        }
    }
    result.ok_or_else(|| PlyError::Header(format!("no `{wanted}` element")))
}

/// One typed value of a binary row.
#[derive(Clone, Copy, Debug)]
pub enum Value {
    U8(u8),
    U16(u16),
    F32(f32),
}

impl Value {
    fn scalar_type(self) -> ScalarType {
        match self {
            Value::U8(_) => ScalarType::U8,
            Value::U16(_) => ScalarType::U16,
            Value::F32(_) => ScalarType::F32,
        }
    }
}

/// Writes a binary-little-endian PLY with a single `vertex` element whose
/// scalar property types are given by `schema`. Each row must match it.
pub fn write_vertices<W: Write>(
    w: &mut W,
    schema: &[(&str, ScalarType)],
    rows: impl ExactSizeIterator<Item = Vec<Value>>,
    comments: &[String],
) -> std::io::Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    for c in comments {
        header.push_str(&format!("comment {c}\n"));
    }
    header.push_str(&format!("element vertex {}\n", rows.len()));
    for (name, t) in schema {
        header.push_str(&format!("property {} {}\n", t.name(), name));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    for row in rows {
        debug_assert_eq!(row.len(), schema.len());
        for (v, (_, t)) in row.iter().zip(schema) {
            debug_assert_eq!(v.scalar_type(), *t);
            match *v {
                Value::U8(x) => w.write_all(&[x])?,
                Value::U16(x) => w.write_all(&x.to_le_bytes())?,
                Value::F32(x) => w.write_all(&x.to_le_bytes())?,
            }
        }
    }
    Ok(())
}
