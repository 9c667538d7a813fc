# Chorus src package
