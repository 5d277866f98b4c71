# Checkout setup helpers
