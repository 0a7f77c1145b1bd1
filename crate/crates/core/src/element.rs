//! Canonical JSON form of stream elements and schema validation.
//!
//! The canonical form is `{"timestamp":<ms>,"values":{<field>:<scalar>,...}}`
//! with fields in schema order and no insignificant whitespace.

use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::model::{Schema, StreamElement, Value, ValueType};

/// One failed rule from `validate_element_against_schema`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("element has {actual} values, schema has {expected} fields")]
    ArityMismatch { expected: usize, actual: usize },
    #[error("field {index} ({name}) expects {expected}, got {actual}")]
    TypeMismatch {
        index: usize,
        name: String,
        expected: ValueType,
        actual: ValueType,
    },
    #[error("field {index} ({name}) is not a finite number")]
    NonFinite { index: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElementError {
    #[error("element does not match schema: {0:?}")]
    TypeMismatch(Vec<Violation>),
    #[error("malformed element JSON: {0}")]
    Malformed(String),
}

/// Checks arity and per-field types. Total: never fails, returns every
/// violated rule.
pub fn validate_element_against_schema(schema: &Schema, e: &StreamElement) -> Vec<Violation> {
    let mut out = Vec::new();
    if e.values.len() != schema.len() {
        out.push(Violation::ArityMismatch {
            expected: schema.len(),
            actual: e.values.len(),
        });
    }
    for (index, (field, value)) in schema.fields().iter().zip(&e.values).enumerate() {
        if value.value_type() != field.value_type() {
            out.push(Violation::TypeMismatch {
                index,
                name: field.name().to_string(),
                expected: field.value_type(),
                actual: value.value_type(),
            });
        } else if let Value::Double(v) = value {
            if !v.is_finite() {
                out.push(Violation::NonFinite {
                    index,
                    name: field.name().to_string(),
                });
            }
        }
    }
    out
}

/// Canonical JSON object for an element known to satisfy `schema`.
pub fn element_to_json(schema: &Schema, e: &StreamElement) -> Result<Json, ElementError> {
    let violations = validate_element_against_schema(schema, e);
    if !violations.is_empty() {
        return Err(ElementError::TypeMismatch(violations));
    }
    let values: Map<String, Json> = schema
        .fields()
        .iter()
        .zip(&e.values)
        .map(|(f, v)| (f.name().to_string(), v.to_json()))
        .collect();
    let mut obj = Map::new();
    obj.insert("timestamp".into(), e.timestamp.into());
    obj.insert("values".into(), Json::Object(values));
    Ok(Json::Object(obj))
}

pub fn serialize_stream_element(
    schema: &Schema,
    e: &StreamElement,
) -> Result<Vec<u8>, ElementError> {
    element_to_json(schema, e)
        .map(|j| serde_json::to_vec(&j).expect("JSON values always serialize"))
}

pub fn element_from_json(schema: &Schema, j: &Json) -> Result<StreamElement, ElementError> {
    let malformed = |m: &str| ElementError::Malformed(m.to_string());
    let obj = j
        .as_object()
        .ok_or_else(|| malformed("expected an object"))?;
    if obj.len() != 2 {
        return Err(malformed("expected exactly timestamp and values"));
    }
    let timestamp = obj
        .get("timestamp")
        .and_then(Json::as_i64)
        .ok_or_else(|| malformed("timestamp must be an integer"))?;
    let values_obj = obj
        .get("values")
        .and_then(Json::as_object)
        .ok_or_else(|| malformed("values must be an object"))?;
    if values_obj.len() != schema.len() {
        return Err(ElementError::TypeMismatch(vec![Violation::ArityMismatch {
            expected: schema.len(),
            actual: values_obj.len(),
        }]));
    }
    let mut values = Vec::with_capacity(schema.len());
    let mut violations = Vec::new();
    for (index, field) in schema.fields().iter().enumerate() {
        let raw = values_obj
            .get(field.name())
            .ok_or_else(|| ElementError::Malformed(format!("missing field {}", field.name())))?;
        let parsed = match (field.value_type(), raw) {
            (ValueType::Double, Json::Number(n)) => n.as_f64().map(Value::Double),
            (ValueType::Integer, Json::Number(n)) => n.as_i64().map(Value::Integer),
            (ValueType::String, Json::String(s)) => Some(Value::Str(s.clone())),
            _ => None,
        };
        match parsed {
            Some(v) => values.push(v),
            None => {
                violations.push(Violation::TypeMismatch {
                    index,
                    name: field.name().to_string(),
                    expected: field.value_type(),
                    actual: json_type(raw),
                });
            }
        }
    }
    if !violations.is_empty() {
        return Err(ElementError::TypeMismatch(violations));
    }
    Ok(StreamElement { timestamp, values })
}

/// Closest value type of an arbitrary JSON scalar, for error reporting.
fn json_type(j: &Json) -> ValueType {
    match j {
        Json::Number(n) if n.is_i64() || n.is_u64() => ValueType::Integer,
        Json::Number(_) => ValueType::Double,
        _ => ValueType::String,
    }
}

pub fn parse_stream_element(schema: &Schema, bytes: &[u8]) -> Result<StreamElement, ElementError> {
    let j: Json =
        serde_json::from_slice(bytes).map_err(|e| ElementError::Malformed(e.to_string()))?;
    element_from_json(schema, &j)
}

/// Lenient decode used for plugin replies: JSON numbers are accepted for
/// either numeric type as long as they convert losslessly, anything else
/// is carried through with its own type so schema validation can flag it.
pub fn element_from_plugin_json(schema: &Schema, j: &Json) -> Result<StreamElement, ElementError> {
    let malformed = |m: &str| ElementError::Malformed(m.to_string());
    let obj = j
        .as_object()
        .ok_or_else(|| malformed("expected an object"))?;
    let timestamp = obj
        .get("timestamp")
        .and_then(Json::as_i64)
        .ok_or_else(|| malformed("timestamp must be an integer"))?;
    let values_obj = obj
        .get("values")
        .and_then(Json::as_object)
        .ok_or_else(|| malformed("values must be an object"))?;
    let mut values = Vec::with_capacity(values_obj.len());
    for field in schema.fields() {
        let Some(raw) = values_obj.get(field.name()) else {
            continue;
        };
        let v = match (field.value_type(), raw) {
            (ValueType::Double, Json::Number(n)) => Value::Double(n.as_f64().unwrap_or(f64::NAN)),
            (_, Json::Number(n)) => match n.as_i64() {
                Some(i) => Value::Integer(i),
                None => Value::Double(n.as_f64().unwrap_or(f64::NAN)),
            },
            (_, Json::String(s)) => Value::Str(s.clone()),
            (_, other) => Value::Str(other.to_string()),
        };
        values.push(v);
    }
    // Keys outside the schema become placeholders so the arity check in
    // validation reports them; a missing key must never be masked by an extra one.
    let missing = schema.len() - values.len();
    let extra = values_obj
        .keys()
        .filter(|k| schema.index_of(k).is_none())
        .count();
    values.extend(std::iter::repeat_n(Value::Str(String::new()), extra));
    if missing > 0 && missing == extra {
        values.push(Value::Str(String::new()));
    }
    Ok(StreamElement { timestamp, values })
}
