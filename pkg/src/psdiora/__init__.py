"""Inside-outside constituency parser trained with partial span constraints."""
