"""Joint action localization, categorization and attribute prediction with
3D convolutional networks on appearance-motion clips, in plain numpy."""

__version__ = "0.1.0"
