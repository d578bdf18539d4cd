"""GridNER - MRC co-prediction engine for flat and nested medical NER"""

__version__ = "1.0.0"
