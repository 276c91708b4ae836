"""ERP classification pipeline."""
