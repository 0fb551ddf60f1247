//! Integer label grids for masks and predictions. 255 is the ignore value.

pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(h * w, data.len());
        LabelMap { h, w, data }
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        LabelMap { h, w, data: vec![v; h * w] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.w + c] = v;
    }
}
