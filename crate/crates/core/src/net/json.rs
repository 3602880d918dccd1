//! Canonical JSON case schema. Field names mirror [`NetworkCase`] exactly;
//! see `docs/case-schema.md`.

use super::{CaseError, NetworkCase};

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        use serde_path_to_error::Segment;
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape(key))),
            Segment::Enum { variant } => out.push_str(&format!("/{}", escape(variant))),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

/// Parses a case from JSON and validates it.
pub fn load_case_json(text: &str) -> Result<NetworkCase, CaseError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let case: NetworkCase = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = pointer_of(e.path());
        let message = e.inner().to_string();
        // serde reports a missing field against its parent object
        if let Some(rest) = message.strip_prefix("missing field `") {
            if let Some(field) = rest.split('`').next() {
                pointer.push('/');
                pointer.push_str(&escape(field));
            }
        }
        CaseError::Schema { pointer, message }
    })?;
    case.validate()?;
    Ok(case)
}

pub fn save_case_json(case: &NetworkCase) -> String {
    serde_json::to_string_pretty(case).expect("NetworkCase serialises infallibly")
}
