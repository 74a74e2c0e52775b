//! CoolDoc: JSON-like trees laid out in a shared heap.
//!
//! Every value is a 24-byte [`RawNode`]. Strings point at their bytes,
//! arrays at a run of nodes, objects at a run of key references and a
//! parallel run of value nodes. Numbers are stored as `f64`.

use rpcool::heap::{HeapError, SharedHeap, ShmAlloc};
use serde_json::{Map, Number, Value};

pub const NULL: u32 = 0;
pub const BOOL: u32 = 1;
pub const NUMBER: u32 = 2;
pub const STRING: u32 = 3;
pub const ARRAY: u32 = 4;
pub const OBJECT: u32 = 5;

/// Deepest nesting the readers follow.
pub const MAX_DEPTH: usize = 64;

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RawNode {
    pub tag: u32,
    pub len: u32,
    pub a: u64,
    pub b: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyRef {
    pub ptr: u64,
    pub len: u64,
}

const NODE: u64 = std::mem::size_of::<RawNode>() as u64;
const KEY: u64 = std::mem::size_of::<KeyRef>() as u64;

fn node(addr: u64) -> RawNode {
    // SAFETY: callers pass addresses of nodes in a mapped heap; inside a
    // sandbox a bad one becomes a violation.
    unsafe { std::ptr::read_volatile(addr as *const RawNode) }
}

fn key(addr: u64) -> KeyRef {
    // SAFETY: as for `node`.
    unsafe { std::ptr::read_volatile(addr as *const KeyRef) }
}

/// # Safety
/// `[ptr, ptr + len)` must be readable.
pub unsafe fn bytes<'a>(ptr: u64, len: u64) -> &'a [u8] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(ptr as *const u8, len as usize)
    }
}

fn put_bytes(a: &impl ShmAlloc, b: &[u8]) -> Result<u64, HeapError> {
    let p = a.alloc_bytes(b.len().max(1) as u64, 1)?;
    // SAFETY: fresh allocation of at least b.len() bytes.
    unsafe { std::ptr::copy_nonoverlapping(b.as_ptr(), p as *mut u8, b.len()) };
    Ok(p)
}

fn write_node(at: u64, n: RawNode) {
    // SAFETY: `at` is a node slot the caller allocated.
    unsafe { std::ptr::write(at as *mut RawNode, n) };
}

fn fill(a: &impl ShmAlloc, at: u64, v: &Value) -> Result<(), HeapError> {
    let n = match v {
        Value::Null => RawNode::default(),
        Value::Bool(b) => RawNode { tag: BOOL, a: *b as u64, ..Default::default() },
        Value::Number(x) => RawNode {
            tag: NUMBER,
            a: x.as_f64().unwrap_or(f64::NAN).to_bits(),
            ..Default::default()
        },
        Value::String(s) => RawNode { tag: STRING, len: s.len() as u32, a: put_bytes(a, s.as_bytes())?, b: 0 },
        Value::Array(xs) => {
            let items = if xs.is_empty() { 0 } else { a.alloc_bytes(NODE * xs.len() as u64, 8)? };
            for (i, x) in xs.iter().enumerate() {
                fill(a, items + i as u64 * NODE, x)?;
            }
            RawNode { tag: ARRAY, len: xs.len() as u32, a: items, b: 0 }
        }
        Value::Object(m) => {
            let (keys, vals) = if m.is_empty() {
                (0, 0)
            } else {
                (a.alloc_bytes(KEY * m.len() as u64, 8)?, a.alloc_bytes(NODE * m.len() as u64, 8)?)
            };
            for (i, (k, x)) in m.iter().enumerate() {
                let kr = KeyRef { ptr: put_bytes(a, k.as_bytes())?, len: k.len() as u64 };
                // SAFETY: slot i of the key run allocated above.
                unsafe { std::ptr::write((keys + i as u64 * KEY) as *mut KeyRef, kr) };
                fill(a, vals + i as u64 * NODE, x)?;
            }
            RawNode { tag: OBJECT, len: m.len() as u32, a: keys, b: vals }
        }
    };
    write_node(at, n);
    Ok(())
}

/// Lays `v` out in `a` and returns the root node's address.
pub fn encode(a: &impl ShmAlloc, v: &Value) -> Result<u64, HeapError> {
    let root = a.alloc_bytes(NODE, 8)?;
    fill(a, root, v)?;
    Ok(root)
}

/// Integral values come back as integers, everything else as `f64`.
fn number(f: f64) -> Value {
    if f.fract() == 0.0 && f.abs() < 9.007_199_254_740_992e15 {
        Value::Number(Number::from(f as i64))
    } else {
        Number::from_f64(f).map_or(Value::Null, Value::Number)
    }
}

fn read(at: u64, depth: usize) -> Value {
    let n = node(at);
    if depth > MAX_DEPTH {
        return Value::Null;
    }
    match n.tag {
        BOOL => Value::Bool(n.a != 0),
        NUMBER => number(f64::from_bits(n.a)),
        // SAFETY: strings written by `encode` are valid for their length.
        STRING => Value::String(String::from_utf8_lossy(unsafe { bytes(n.a, n.len as u64) }).into_owned()),
        ARRAY => Value::Array((0..n.len as u64).map(|i| read(n.a + i * NODE, depth + 1)).collect()),
        OBJECT => {
            let mut m = Map::new();
            for i in 0..n.len as u64 {
                let k = key(n.a + i * KEY);
                // SAFETY: as for strings.
                let name = String::from_utf8_lossy(unsafe { bytes(k.ptr, k.len) }).into_owned();
                m.insert(name, read(n.b + i * NODE, depth + 1));
            }
            Value::Object(m)
        }
        _ => Value::Null,
    }
}

/// Reads the tree at `root` back into a `Value`.
pub fn decode(root: u64) -> Value {
    read(root, 0)
}

/// Walks the tree checking tags and lengths; returns the node count, or
/// `None` if it is malformed or bigger than `limit` nodes. Every pointer is
/// followed, so run it in a sandbox for untrusted trees.
pub fn validate(root: u64, limit: u64) -> Option<u64> {
    fn walk(at: u64, depth: usize, count: &mut u64, limit: u64) -> bool {
        *count += 1;
        if *count > limit || depth > MAX_DEPTH || at % 8 != 0 {
            return false;
        }
        let n = node(at);
        match n.tag {
            NULL | BOOL | NUMBER => true,
            STRING => {
                // SAFETY: touching the bytes is the point; a bad pointer
                // faults inside the caller's sandbox.
                let b = unsafe { bytes(n.a, n.len as u64) };
                std::str::from_utf8(b).is_ok()
            }
            ARRAY => (0..n.len as u64).all(|i| walk(n.a + i * NODE, depth + 1, count, limit)),
            OBJECT => (0..n.len as u64).all(|i| {
                let k = key(n.a + i * KEY);
                // SAFETY: as above.
                let ok = std::str::from_utf8(unsafe { bytes(k.ptr, k.len) }).is_ok();
                ok && walk(n.b + i * NODE, depth + 1, count, limit)
            }),
            _ => false,
        }
    }
    let mut count = 0;
    walk(root, 0, &mut count, limit).then_some(count)
}

fn copy_into(dst: &impl ShmAlloc, at: u64, src: u64) -> Result<(), HeapError> {
    let n = node(src);
    let out = match n.tag {
        STRING => RawNode { a: put_bytes(dst, unsafe { bytes(n.a, n.len as u64) })?, ..n },
        ARRAY => {
            let items = if n.len == 0 { 0 } else { dst.alloc_bytes(NODE * n.len as u64, 8)? };
            for i in 0..n.len as u64 {
                copy_into(dst, items + i * NODE, n.a + i * NODE)?;
            }
            RawNode { a: items, ..n }
        }
        OBJECT => {
            let (keys, vals) = if n.len == 0 {
                (0, 0)
            } else {
                (dst.alloc_bytes(KEY * n.len as u64, 8)?, dst.alloc_bytes(NODE * n.len as u64, 8)?)
            };
            for i in 0..n.len as u64 {
                let k = key(n.a + i * KEY);
                let kr = KeyRef { ptr: put_bytes(dst, unsafe { bytes(k.ptr, k.len) })?, len: k.len };
                // SAFETY: slot i of the key run allocated above.
                unsafe { std::ptr::write((keys + i * KEY) as *mut KeyRef, kr) };
                copy_into(dst, vals + i * NODE, n.b + i * NODE)?;
            }
            RawNode { a: keys, b: vals, ..n }
        }
        _ => n,
    };
    write_node(at, out);
    Ok(())
}

/// Copies a validated tree into `dst`.
pub fn deep_copy(dst: &impl ShmAlloc, root: u64) -> Result<u64, HeapError> {
    let r = dst.alloc_bytes(NODE, 8)?;
    copy_into(dst, r, root)?;
    Ok(r)
}

/// Frees a tree built by [`encode`] or [`deep_copy`], root included.
pub fn free(heap: &SharedHeap, root: u64) -> Result<(), HeapError> {
    fn inner(heap: &SharedHeap, at: u64) -> Result<(), HeapError> {
        let n = node(at);
        match n.tag {
            STRING => heap.free(n.a)?,
            ARRAY if n.len > 0 => {
                for i in 0..n.len as u64 {
                    inner(heap, n.a + i * NODE)?;
                }
                heap.free(n.a)?;
            }
            OBJECT if n.len > 0 => {
                for i in 0..n.len as u64 {
                    heap.free(key(n.a + i * KEY).ptr)?;
                    inner(heap, n.b + i * NODE)?;
                }
                heap.free(n.a)?;
                heap.free(n.b)?;
            }
            _ => {}
        }
        Ok(())
    }
    inner(heap, root)?;
    heap.free(root)
}

/// A dotted field path such as `nested_obj.num` or `nested_arr.2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path(Vec<String>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed path {0:?}")]
pub struct BadPath(pub String);

impl std::str::FromStr for Path {
    type Err = BadPath;
    fn from_str(s: &str) -> Result<Self, BadPath> {
        let segs: Vec<String> = s.split('.').map(str::to_string).collect();
        if s.is_empty() || segs.iter().any(|x| x.is_empty()) || segs.len() > MAX_DEPTH {
            return Err(BadPath(s.to_string()));
        }
        Ok(Self(segs))
    }
}

impl Path {
    pub fn segments(&self) -> &[String] {
        &self.0
    }

    /// The number at this path in a heap tree.
    pub fn number_at(&self, root: u64) -> Option<f64> {
        let mut at = root;
        for seg in &self.0 {
            let n = node(at);
            at = match n.tag {
                ARRAY => {
                    let i: u64 = seg.parse().ok()?;
                    (i < n.len as u64).then(|| n.a + i * NODE)?
                }
                OBJECT => {
                    let i = (0..n.len as u64).find(|&i| {
                        let k = key(n.a + i * KEY);
                        // SAFETY: keys of a stored tree are readable.
                        k.len == seg.len() as u64 && unsafe { bytes(k.ptr, k.len) } == seg.as_bytes()
                    })?;
                    n.b + i * NODE
                }
                _ => return None,
            };
        }
        let n = node(at);
        (n.tag == NUMBER).then(|| f64::from_bits(n.a))
    }

    /// The same lookup on an in-memory value.
    pub fn number_in(&self, v: &Value) -> Option<f64> {
        let mut cur = v;
        for seg in &self.0 {
            cur = match cur {
                Value::Array(xs) => xs.get(seg.parse::<usize>().ok()?)?,
                Value::Object(m) => m.get(seg)?,
                _ => return None,
            };
        }
        cur.as_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rpcool::runtime::scratch_heap;
    use serde_json::json;

    fn heap() -> SharedHeap {
        SharedHeap::format(scratch_heap(&std::env::temp_dir(), 8 << 20).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_and_copy() {
        let h = heap();
        let v = json!({"a": 1, "b": [true, null, "x", 2.5], "c": {"d": {"e": -7}}, "": []});
        let r = encode(&h, &v).unwrap();
        assert_eq!(decode(r), v);
        assert_eq!(validate(r, 100), Some(11));
        assert_eq!(validate(r, 5), None);
        let c = deep_copy(&h, r).unwrap();
        let before = h.stats().live_allocations;
        free(&h, r).unwrap();
        assert!(h.stats().live_allocations < before);
        assert_eq!(decode(c), v);
    }

    #[test]
    fn paths() {
        let v = json!({"n": {"x": [1, {"y": 4}]}, "s": "3"});
        let h = heap();
        let r = encode(&h, &v).unwrap();
        for (p, want) in [("n.x.0", Some(1.0)), ("n.x.1.y", Some(4.0)), ("s", None), ("n.x.9", None), ("q", None)] {
            let p: Path = p.parse().unwrap();
            assert_eq!(p.number_at(r), want);
            assert_eq!(p.number_in(&v), want);
        }
        for bad in ["", "a..b", ".a", "a."] {
            assert!(bad.parse::<Path>().is_err(), "{bad}");
        }
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            (-1_000_000i64..1_000_000).prop_map(|x| json!(x)),
            "[a-z]{0,8}".prop_map(Value::String),
        ];
        leaf.prop_recursive(4, 64, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
                proptest::collection::btree_map("[a-z]{1,4}", inner, 0..6)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn encode_decode(v in arb_json()) {
            let h = heap();
            let r = encode(&h, &v).unwrap();
            prop_assert_eq!(decode(r), v.clone());
            prop_assert!(validate(r, 10_000).is_some());
            let c = deep_copy(&h, r).unwrap();
            free(&h, r).unwrap();
            prop_assert_eq!(decode(c), v);
        }
    }
}
