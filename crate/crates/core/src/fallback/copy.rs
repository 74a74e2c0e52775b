//! Deep copies of linked structures between heaps.
//!
//! A fallback connection's heap can only be shared with its one peer, so data
//! that lives in another connection's heap has to be copied over. Layouts
//! describe where each type keeps its pointers; [`deep_copy`] walks the
//! structure from a root, copies every reachable object into the destination
//! and rewrites the pointers. Shared and cyclic references are preserved.

use std::collections::HashMap;

use crate::heap::{HeapError, ShmAlloc};
use crate::runtime::mapping_containing;

/// Element type of an array field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element {
    /// Plain data of the given size; copied byte for byte.
    Bytes(u64),
    /// Inline values of a registered layout.
    Layout(String),
}

/// An out-of-line array: a pointer field and a separate element-count field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayField {
    pub ptr_offset: u64,
    pub len_offset: u64,
    pub element: Element,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub size: u64,
    pub align: u64,
    /// Pointer fields: offset and the layout of the pointee.
    pub refs: Vec<(u64, String)>,
    pub arrays: Vec<ArrayField>,
}

impl Layout {
    pub fn new(size: u64, align: u64) -> Self {
        Self {
            size,
            align: align.max(1),
            refs: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn of<T>() -> Self {
        Self::new(std::mem::size_of::<T>() as u64, std::mem::align_of::<T>() as u64)
    }

    pub fn reference(mut self, offset: u64, target: &str) -> Self {
        self.refs.push((offset, target.to_string()));
        self
    }

    pub fn array(mut self, ptr_offset: u64, len_offset: u64, element: Element) -> Self {
        self.arrays.push(ArrayField {
            ptr_offset,
            len_offset,
            element,
        });
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CopyError {
    #[error("no layout registered as {0:?}")]
    UnknownLayout(String),
    #[error("layout {0:?} is already registered")]
    Duplicate(String),
    #[error("layout {name:?}: field at {offset} does not fit in {size} bytes")]
    BadField { name: String, offset: u64, size: u64 },
    #[error("{0:#x} is not inside a mapped heap")]
    NotInHeap(u64),
    #[error("reference {value:#x} at {at:#x} escapes the source heap")]
    Escaping { at: u64, value: u64 },
    #[error(transparent)]
    Heap(#[from] HeapError),
}

#[derive(Debug, Default, Clone)]
pub struct LayoutRegistry {
    layouts: HashMap<String, Layout>,
}

impl LayoutRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, layout: Layout) -> Result<(), CopyError> {
        if self.layouts.contains_key(name) {
            return Err(CopyError::Duplicate(name.to_string()));
        }
        let bad = |offset| CopyError::BadField {
            name: name.to_string(),
            offset,
            size: layout.size,
        };
        for &(off, _) in &layout.refs {
            if off + 8 > layout.size {
                return Err(bad(off));
            }
        }
        for a in &layout.arrays {
            for off in [a.ptr_offset, a.len_offset] {
                if off + 8 > layout.size {
                    return Err(bad(off));
                }
            }
        }
        self.layouts.insert(name.to_string(), layout);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Layout, CopyError> {
        self.layouts
            .get(name)
            .ok_or_else(|| CopyError::UnknownLayout(name.to_string()))
    }
}

struct Copier<'a, A: ShmAlloc> {
    dst: &'a A,
    reg: &'a LayoutRegistry,
    src: (u64, u64),
    objects: HashMap<u64, u64>,
    arrays: HashMap<u64, u64>,
    work: Vec<(u64, u64, &'a Layout)>,
}

fn read(addr: u64) -> u64 {
    // SAFETY: callers check that addr lies inside the mapped source heap.
    unsafe { std::ptr::read_unaligned(addr as *const u64) }
}

fn write(addr: u64, v: u64) {
    // SAFETY: addr lies inside a freshly allocated destination object.
    unsafe { std::ptr::write_unaligned(addr as *mut u64, v) }
}

impl<'a, A: ShmAlloc> Copier<'a, A> {
    fn check(&self, at: u64, value: u64, len: u64) -> Result<(), CopyError> {
        let end = value.checked_add(len).ok_or(CopyError::Escaping { at, value })?;
        if value < self.src.0 || end > self.src.1 {
            return Err(CopyError::Escaping { at, value });
        }
        Ok(())
    }

    fn object(&mut self, at: u64, src: u64, name: &str) -> Result<u64, CopyError> {
        if let Some(&d) = self.objects.get(&src) {
            return Ok(d);
        }
        let l = self.reg.get(name)?;
        self.check(at, src, l.size)?;
        let d = self.dst.alloc_bytes(l.size.max(1), l.align)?;
        // SAFETY: both ranges hold l.size bytes and belong to different
        // allocations.
        unsafe { std::ptr::copy_nonoverlapping(src as *const u8, d as *mut u8, l.size as usize) };
        self.objects.insert(src, d);
        self.work.push((src, d, l));
        Ok(d)
    }

    fn fields(&mut self, src: u64, dst: u64, l: &'a Layout) -> Result<(), CopyError> {
        for (off, target) in &l.refs {
            let v = read(src + off);
            let nv = if v == 0 { 0 } else { self.object(src + off, v, target)? };
            write(dst + off, nv);
        }
        for a in &l.arrays {
            let p = read(src + a.ptr_offset);
            let n = read(src + a.len_offset);
            if p == 0 {
                write(dst + a.ptr_offset, 0);
                continue;
            }
            let (esize, align, elem) = match &a.element {
                Element::Bytes(s) => (*s, 8, None),
                Element::Layout(name) => {
                    let el = self.reg.get(name)?;
                    (el.size, el.align, Some(el))
                }
            };
            let bytes = n.checked_mul(esize).ok_or(CopyError::Escaping {
                at: src + a.len_offset,
                value: p,
            })?;
            self.check(src + a.ptr_offset, p, bytes)?;
            let d = match self.arrays.get(&p) {
                Some(&d) => d,
                None => {
                    let d = self.dst.alloc_bytes(bytes.max(1), align)?;
                    // SAFETY: as in `object`.
                    unsafe { std::ptr::copy_nonoverlapping(p as *const u8, d as *mut u8, bytes as usize) };
                    self.arrays.insert(p, d);
                    if let Some(el) = elem {
                        for i in 0..n {
                            self.work.push((p + i * esize, d + i * esize, el));
                        }
                    }
                    d
                }
            };
            write(dst + a.ptr_offset, d);
        }
        Ok(())
    }
}

/// Copies the structure rooted at `root` (of layout `layout`) into `dst` and
/// returns the new root. All references must stay inside the heap that
/// contains `root`. A null root copies to null.
pub fn deep_copy(dst: &impl ShmAlloc, root: u64, layout: &str, reg: &LayoutRegistry) -> Result<u64, CopyError> {
    reg.get(layout)?;
    if root == 0 {
        return Ok(0);
    }
    let m = mapping_containing(root).ok_or(CopyError::NotInHeap(root))?;
    crate::runtime::ensure_thread_access();
    let mut c = Copier {
        dst,
        reg,
        src: (m.base(), m.end()),
        objects: HashMap::new(),
        arrays: HashMap::new(),
        work: Vec::new(),
    };
    let d = c.object(root, root, layout)?;
    while let Some((s, d, l)) = c.work.pop() {
        c.fields(s, d, l)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::tests::scratch;
    use crate::heap::SharedHeap;
    use std::collections::HashSet;

    #[repr(C)]
    #[derive(Clone, Copy)]
    struct Node {
        value: u64,
        next: u64,
        other: u64,
    }

    #[repr(C)]
    #[derive(Clone, Copy)]
    struct Bag {
        items: u64,
        len: u64,
        blob: u64,
        blob_len: u64,
    }

    fn registry() -> LayoutRegistry {
        let mut r = LayoutRegistry::new();
        r.register("Node", Layout::of::<Node>().reference(8, "Node").reference(16, "Node"))
            .unwrap();
        r.register(
            "Bag",
            Layout::of::<Bag>()
                .array(0, 8, Element::Layout("Node".into()))
                .array(16, 24, Element::Bytes(1)),
        )
        .unwrap();
        r
    }

    fn node(h: &SharedHeap, value: u64, next: u64) -> u64 {
        h.alloc_value(Node { value, next, other: 0 }).unwrap().addr()
    }

    fn get(a: u64) -> Node {
        unsafe { *(a as *const Node) }
    }

    fn walk(root: u64) -> (Vec<u64>, Vec<u64>) {
        let (mut vals, mut addrs) = (Vec::new(), Vec::new());
        let mut seen = HashSet::new();
        let mut p = root;
        while p != 0 && seen.insert(p) {
            vals.push(get(p).value);
            addrs.push(p);
            p = get(p).next;
        }
        (vals, addrs)
    }

    #[test]
    fn list_copy_is_isomorphic_and_disjoint() {
        let (src, dst) = (scratch(1 << 20), scratch(1 << 20));
        let mut head = 0;
        for v in [3, 2, 1] {
            head = node(&src, v, head);
        }
        let copy = deep_copy(&dst, head, "Node", &registry()).unwrap();
        let (va, aa) = walk(head);
        let (vb, ab) = walk(copy);
        assert_eq!(va, vec![1, 2, 3]);
        assert_eq!(va, vb);
        assert!(ab.iter().all(|a| dst.contains(*a)));
        assert!(aa.iter().all(|a| !ab.contains(a)));
    }

    #[test]
    fn cycles_and_sharing_preserved() {
        let (src, dst) = (scratch(1 << 20), scratch(1 << 20));
        let a = node(&src, 1, 0);
        let b = node(&src, 2, a);
        unsafe {
            (*(a as *mut Node)).next = b;
            (*(a as *mut Node)).other = b;
        }
        let ca = deep_copy(&dst, a, "Node", &registry()).unwrap();
        let cb = get(ca).next;
        assert_eq!(get(cb).value, 2);
        assert_eq!(get(cb).next, ca);
        assert_eq!(get(ca).other, cb);
    }

    #[test]
    fn arrays_copied_with_elements() {
        let (src, dst) = (scratch(1 << 20), scratch(1 << 20));
        let target = node(&src, 42, 0);
        let items = src
            .alloc_slice(&[
                Node { value: 1, next: target, other: 0 },
                Node { value: 2, next: 0, other: 0 },
            ])
            .unwrap()
            .addr();
        let blob = src.alloc_slice(b"hello").unwrap().addr();
        let bag = src
            .alloc_value(Bag { items, len: 2, blob, blob_len: 5 })
            .unwrap()
            .addr();
        let c = deep_copy(&dst, bag, "Bag", &registry()).unwrap();
        let cb = unsafe { *(c as *const Bag) };
        assert!(dst.contains(cb.items) && dst.contains(cb.blob));
        let e0 = get(cb.items);
        assert_eq!(e0.value, 1);
        assert!(dst.contains(e0.next));
        assert_eq!(get(e0.next).value, 42);
        assert_eq!(get(cb.items + 24).value, 2);
        assert_eq!(unsafe { std::slice::from_raw_parts(cb.blob as *const u8, 5) }, b"hello");
    }

    #[test]
    fn null_unknown_and_escaping() {
        let (src, dst) = (scratch(1 << 20), scratch(1 << 20));
        let reg = registry();
        assert_eq!(deep_copy(&dst, 0, "Node", &reg).unwrap(), 0);
        assert!(matches!(deep_copy(&dst, 0, "Nope", &reg), Err(CopyError::UnknownLayout(_))));
        let outside = node(&dst, 9, 0);
        let n = node(&src, 1, outside);
        assert!(matches!(deep_copy(&dst, n, "Node", &reg), Err(CopyError::Escaping { .. })));
        let mut r = LayoutRegistry::new();
        assert!(r.register("X", Layout::new(8, 8).reference(4, "X")).is_err());
        r.register("Y", Layout::new(8, 8)).unwrap();
        assert!(matches!(r.register("Y", Layout::new(8, 8)), Err(CopyError::Duplicate(_))));
    }
}
