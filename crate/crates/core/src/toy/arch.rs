use crate::hooks::{BlockInfo, Section};

/// One step of the forward program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Transformer block, by position in [`ToyArchitecture::blocks`].
    Block(usize),
    /// Halve the grid (keep every other row and column).
    Down,
    /// Double the grid by repetition.
    Up,
    SaveSkip(usize),
    AddSkip(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyArchitecture {
    pub blocks: Vec<BlockInfo>,
    pub program: Vec<Op>,
    pub height: usize,
    pub width: usize,
}

impl ToyArchitecture {
    pub fn new(height: usize, width: usize) -> Self {
        let res = |level: usize| (height >> level, width >> level);
        let plan: [(Section, usize); 16] = [
            (Section::Encoder, 0),
            (Section::Encoder, 0),
            (Section::Encoder, 1),
            (Section::Encoder, 1),
            (Section::Encoder, 2),
            (Section::Encoder, 2),
            (Section::Mid, 2),
            (Section::Decoder, 2),
            (Section::Decoder, 2),
            (Section::Decoder, 2),
            (Section::Decoder, 1),
            (Section::Decoder, 1),
            (Section::Decoder, 1),
            (Section::Decoder, 0),
            (Section::Decoder, 0),
            (Section::Decoder, 0),
        ];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(section, level))| BlockInfo {
                index: i + 1,
                section,
                resolution: res(level),
                has_cross: true,
            })
            .collect();
        use Op::*;
        let program = vec![
            Block(0), Block(1), SaveSkip(0), Down,
            Block(2), Block(3), SaveSkip(1), Down,
            Block(4), Block(5), SaveSkip(2),
            Block(6),
            AddSkip(2), Block(7), Block(8), Block(9), Up,
            AddSkip(1), Block(10), Block(11), Block(12), Up,
            AddSkip(0), Block(13), Block(14), Block(15),
        ];
        Self {
            blocks,
            program,
            height,
            width,
        }
    }

    pub fn block(&self, index: usize) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.index == index)
    }

    pub fn encoder_blocks(&self) -> impl Iterator<Item = &BlockInfo> {
        self.blocks.iter().filter(|b| b.section == Section::Encoder)
    }
}
