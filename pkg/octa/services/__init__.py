"""
Business logic services package.

This package contains service layer implementations for:
- preprocess: registration, notch filtering and CLAHE of en-face images
- segnet: patch-based CNN vessel classifier (training, inference, persistence)
- binarize: Otsu thresholding, gamma correction and FAZ cleanup
- morphometry: FAZ extraction and clinical outcome measures
- metrics: pixel-wise agreement against manual segmentations
- stats: paired/Welch t-tests, ICC and cohort reports
- synth: synthetic angiograms with exact ground truth
- overlay: annotated colour overlays
- pipeline: end-to-end orchestration used by the CLI and the HTTP API
- task_manager: background job tracking
"""
